//! Reverse-mode automatic differentiation on dense row-major tensors.
//!
//! The engine is a define-by-run tape: every operation appends a node
//! holding its output buffer and a backward closure. [`Tape::backward`]
//! walks nodes in reverse insertion order, accumulating adjoints by
//! addition, which handles arbitrary fan-out.
//!
//! [`GateHandle`] is the hook the attention mechanisms are built on: a
//! gate in `[0,1]` can either scale activations in both passes
//! (`MultiplyForward`) or leave the forward value untouched and scale
//! only the gradient flowing back (`MultiplyBackwardOnly`).

mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_multi};
pub use ops::{broadcast_shape, EwOp};
pub use tape::{Ctx, Tape, Val};
pub use tensor::Tensor;

use crate::{Error, Result, Scalar};

/// How a gate interacts with the two passes at its attachment site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    /// `out = x ⊙ g`: the gate scales activations, so the backward pass is
    /// scaled too (feature-selection attention).
    MultiplyForward,
    /// `out = x` but `dx = upstream ⊙ g`: the forward value is untouched
    /// and only the gradient is attenuated (loss attention).
    MultiplyBackwardOnly,
}

/// A named gradient-filter site: gate values in `[0,1]` plus the mode
/// deciding whether they scale the forward pass, the backward pass,
/// or (equivalently for `MultiplyForward`) both.
#[derive(Debug, Clone)]
pub struct GateHandle<F: Scalar> {
    site_id: String,
    gate: Tensor<F>,
    mode: GateMode,
}

impl<F: Scalar> GateHandle<F> {
    /// Validates that every gate value lies in `[0,1]`.
    pub fn new(site_id: impl Into<String>, gate: Tensor<F>, mode: GateMode) -> Result<Self> {
        let site_id = site_id.into();
        for &v in gate.data() {
            if !(v >= F::zero() && v <= F::one()) {
                return Err(Error::InvalidArgument(format!(
                    "gate `{site_id}` has value {v} outside [0,1]"
                )));
            }
        }
        Ok(GateHandle { site_id, gate, mode })
    }

    pub fn site_id(&self) -> &str {
        &self.site_id
    }

    pub fn gate(&self) -> &Tensor<F> {
        &self.gate
    }

    pub fn mode(&self) -> GateMode {
        self.mode
    }

    /// Mean gate value, used by the training log.
    pub fn mean(&self) -> f64 {
        let n = self.gate.numel().max(1);
        self.gate.data().iter().map(|v| v.as_f64()).sum::<f64>() / n as f64
    }
}
