//! Parameter containers with deterministic initialization.

use super::conv::ConvSpec;
use super::norm::BatchStats;
use crate::autodiff::{Tape, Tensor, Val};
use crate::{Result, Scalar};
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn he_normal<F: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| F::from_f64(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data consistent")
}

/// Convolution weights and bias.
#[derive(Debug, Clone)]
pub struct ConvParams<F: Scalar> {
    pub spec: ConvSpec,
    pub w: Tensor<F>,
    pub b: Tensor<F>,
}

impl<F: Scalar> ConvParams<F> {
    /// He-normal weights (fan-in = Cin·∏kernel), zero bias.
    pub fn init(spec: ConvSpec, rng: &mut impl Rng) -> Self {
        let fan_in = spec.in_channels * spec.kernel.iter().product::<usize>();
        let w = he_normal(&spec.weight_shape(), fan_in, rng).with_grad();
        let b = Tensor::zeros(&[spec.out_channels]).with_grad();
        ConvParams { spec, w, b }
    }

    /// Place parameters on the tape (differentiable) and convolve.
    pub fn forward(&self, tape: &mut Tape<F>, x: Val) -> Result<(Val, Val, Val)> {
        let w = tape.push_leaf(self.w.shape().to_vec(), self.w.data().to_vec(), true);
        let b = tape.push_leaf(self.b.shape().to_vec(), self.b.data().to_vec(), true);
        let y = tape.conv(x, w, b, &self.spec)?;
        Ok((y, w, b))
    }
}

/// Batch-norm affine pair plus running statistics (running stats are
/// state, not parameters: updated via [`BatchStats`], never by SGD).
#[derive(Debug, Clone)]
pub struct BnParams<F: Scalar> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub running_mean: Tensor<F>,
    pub running_var: Tensor<F>,
    pub eps: f64,
}

impl<F: Scalar> BnParams<F> {
    /// γ=1, β=0, running mean 0, running variance 1.
    pub fn init(channels: usize, eps: f64) -> Self {
        BnParams {
            gamma: Tensor::full(&[channels], F::one()).with_grad(),
            beta: Tensor::zeros(&[channels]).with_grad(),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], F::one()),
            eps,
        }
    }

    /// Training forward: batch statistics; returns them for the caller to
    /// fold into the running averages after the optimizer step.
    pub fn forward_train(&self, tape: &mut Tape<F>, x: Val) -> Result<(Val, Val, Val, BatchStats<F>)> {
        let g = tape.push_leaf(self.gamma.shape().to_vec(), self.gamma.data().to_vec(), true);
        let b = tape.push_leaf(self.beta.shape().to_vec(), self.beta.data().to_vec(), true);
        let (y, stats) = tape.batchnorm_train(x, g, b, self.eps)?;
        Ok((y, g, b, stats))
    }

    /// Inference forward: frozen running statistics.
    pub fn forward_eval(&self, tape: &mut Tape<F>, x: Val) -> Result<Val> {
        let g = tape.push_leaf(self.gamma.shape().to_vec(), self.gamma.data().to_vec(), false);
        let b = tape.push_leaf(self.beta.shape().to_vec(), self.beta.data().to_vec(), false);
        tape.batchnorm_eval(x, g, b, self.running_mean.data(), self.running_var.data(), self.eps)
    }

    /// Fold one batch's statistics into the running averages.
    pub fn apply_update(&mut self, stats: &BatchStats<F>, momentum: F) {
        super::norm::update_running_stats(self.running_mean.data_mut(), &stats.mean, momentum);
        super::norm::update_running_stats(self.running_var.data_mut(), &stats.var, momentum);
    }
}

/// Fully-connected weights and bias.
#[derive(Debug, Clone)]
pub struct LinearParams<F: Scalar> {
    pub w: Tensor<F>,
    pub b: Tensor<F>,
}

impl<F: Scalar> LinearParams<F> {
    /// He-normal weights, bias at a chosen constant (attention gates use a
    /// positive bias so they start nearly open).
    pub fn init(cin: usize, cout: usize, bias_value: f64, rng: &mut impl Rng) -> Self {
        LinearParams {
            w: he_normal(&[cout, cin], cin, rng).with_grad(),
            b: Tensor::full(&[cout], F::from_f64(bias_value)).with_grad(),
        }
    }

    pub fn forward(&self, tape: &mut Tape<F>, x: Val) -> Result<(Val, Val, Val)> {
        let w = tape.push_leaf(self.w.shape().to_vec(), self.w.data().to_vec(), true);
        let b = tape.push_leaf(self.b.shape().to_vec(), self.b.data().to_vec(), true);
        let y = tape.linear(x, w, b)?;
        Ok((y, w, b))
    }
}

/// Enumerate named parameter tensors in a fixed order.
///
/// The contract shared by the optimizer, the checkpoint format, and every
/// `forward` method: visiting order equals the order in which `forward`
/// pushes tape handles for the *trainable* tensors (those with
/// `requires_grad`), so the two sequences can be zipped. State tensors
/// (batch-norm running statistics) are visited too — checkpoints need
/// them — but carry `requires_grad = false` and are skipped by the
/// optimizer.
pub trait VisitParams<F: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>));
}

impl<F: Scalar> VisitParams<F> for ConvParams<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

impl<F: Scalar> VisitParams<F> for LinearParams<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

impl<F: Scalar> VisitParams<F> for BnParams<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
        f(format!("{prefix}.running_mean"), &self.running_mean);
        f(format!("{prefix}.running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
        f(format!("{prefix}.running_mean"), &mut self.running_mean);
        f(format!("{prefix}.running_var"), &mut self.running_var);
    }
}
