//! Desk-scale laboratory for training two-stream segmentation networks that
//! stay usable when a fraction of the training labels is wrong.
//!
//! The crate is organized bottom-up:
//!
//! * [`autodiff`] — a small reverse-mode tape over dense tensors, including
//!   the gradient-gating hook that the attention modules rely on.
//! * [`layers`] — convolution / batch-norm / pooling / dense-block layers and
//!   exact receptive-field bookkeeping for architecture specs.
//! * [`attention`] — the three gradient-filtering attention mechanisms
//!   (loss, spatial, channel) and the label-noise diffusion model that
//!   decides which one belongs at which depth.
//! * [`dan`] — the two-stream network itself: forward, loss, SGD training,
//!   prediction, ablation, checkpoints.
//! * [`distill`] — geometric test-time augmentation, majority voting, and
//!   the data/model/hierarchical distillation ladder for pseudo-labels.
//! * [`selftrain`] — dataset splitting, label-noise injection, and the
//!   three-stage self-training pipeline with its ablation sweep.
//! * [`data`] — synthetic volumetric phantoms with controllable noise and
//!   the `DANVOL1` on-disk volume format.
//! * [`metrics`] — Dice, boundary extraction, average boundary distance,
//!   Hausdorff distance, and the composite score.
//! * [`config`] / [`cli`] — flat key=value run configuration and the
//!   `danlab` command-line front end.
//! * [`oracles`] — slow, independent reference implementations used by
//!   `danlab selfcheck` and by the test suite.

pub mod autodiff;
pub mod layers;
pub mod attention;
pub mod dan;
pub mod distill;
pub mod selftrain;
pub mod data;
pub mod metrics;
pub mod config;
pub mod cli;
pub mod oracles;

mod error;
mod scalar;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};

/// Deterministic RNG: the one seeded generator used everywhere randomness
/// is needed, so runs with equal seeds are bit-identical.
pub fn seeded_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
pub(crate) use seeded_rng as test_rng;
