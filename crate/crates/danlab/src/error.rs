//! Crate-wide error type. Every fallible public operation returns
//! [`Result`]; panics are reserved for internal invariant violations.

use std::path::PathBuf;

/// Errors produced by tensor ops, layers, training, I/O and the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or volume shapes do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An argument is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An operation produced a NaN or infinity in its output.
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    /// A label value does not fit the declared number of classes.
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    /// A boundary-distance metric was asked for a class with an empty
    /// boundary on one side; the value is undefined, never zero.
    #[error("boundary distance undefined: class {class} has an empty boundary in the {side} volume")]
    EmptyBoundary { class: usize, side: &'static str },

    /// Filesystem error, annotated with the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A volume or checkpoint file does not start with the expected magic.
    #[error("{path}: bad magic, expected `{expected}`")]
    BadMagic { path: PathBuf, expected: &'static str },

    /// A volume or checkpoint file ended before its header said it would.
    #[error("{path}: truncated at byte offset {offset}")]
    Truncated { path: PathBuf, offset: u64 },

    /// A volume file declares an element kind this build does not know.
    #[error("{path}: unknown volume element kind {kind}")]
    UnknownKind { path: PathBuf, kind: u32 },

    /// Configuration file or override problem (unknown key, bad value...).
    #[error("config error: {0}")]
    Config(String),

    /// A checkpoint is structurally valid but does not match the model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss or gradient.
    #[error("training diverged at iteration {iter}: {what}")]
    Diverged { iter: usize, what: String },

    /// A self-training pipeline stage failed; wraps the underlying error
    /// so partial progress can be diagnosed from the run directory.
    #[error("pipeline stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wrap an I/O error with the path it happened on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Tag an error with the pipeline stage it occurred in.
    pub fn in_stage(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |e| Error::Stage { stage, source: Box::new(e) }
    }

    /// Process exit code for the CLI: usage/config problems exit 2,
    /// runtime failures exit 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
