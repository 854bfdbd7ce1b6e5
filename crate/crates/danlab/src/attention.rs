//! The three attention families and the noise-diffusion placement model.
//!
//! Loss attention (LA) is parameter-free: it compares the two streams'
//! hard predictions voxel by voxel and keeps the loss only where they
//! disagree, optionally smoothing the binary map with a small Gaussian.
//! Spatial attention (SA) and channel attention (CA) are small trainable
//! gate networks applied multiplicatively to both streams' features.
//! Which family belongs at which depth follows from a diffusion model of
//! label noise through the receptive field: the probability that at least
//! one voxel inside a unit's field is mislabeled.

use crate::autodiff::{Tape, Tensor, Val};
use crate::layers::{ArchitectureSpec, ConvParams, ConvSpec, LinearParams, VisitParams};
use crate::{Error, Result, Scalar};
use rand::Rng;
use std::fmt;

/// Voxel weight map produced by [`loss_attention`]: 1 where the streams'
/// hard predictions differ, 0 where they agree; values in [0,1] after
/// smoothing. Shape `[B, 1, spatial…]`.
#[derive(Debug, Clone)]
pub struct DisagreementMap<F: Scalar> {
    values: Tensor<F>,
}

impl<F: Scalar> DisagreementMap<F> {
    pub fn values(&self) -> &Tensor<F> {
        &self.values
    }

    /// Flattened weights, one per voxel, ready for the weighted loss.
    pub fn weights(&self) -> &[F] {
        self.values.data()
    }

    /// Fraction of voxels carrying any weight.
    pub fn active_fraction(&self) -> f64 {
        let n = self.values.numel();
        let active = self.values.data().iter().filter(|w| **w > F::zero()).count();
        active as f64 / n as f64
    }
}

/// Normalized Gaussian smoothing weights, one odd extent per spatial
/// axis, evaluated on the integer grid and normalized to unit sum.
#[derive(Debug, Clone)]
pub struct GaussianKernel {
    sizes: Vec<usize>,
    sigma: f64,
    weights: Vec<f64>,
}

/// Build a Gaussian kernel: `weights[i] ∝ exp(−‖i−c‖² / (2σ²))` over the
/// full multi-dimensional grid, normalized to sum 1.
pub fn gaussian_kernel(sizes: &[usize], sigma: f64) -> Result<GaussianKernel> {
    if sizes.is_empty() {
        return Err(Error::InvalidArgument("gaussian kernel needs at least one axis".into()));
    }
    if let Some(s) = sizes.iter().find(|s| **s == 0 || **s % 2 == 0) {
        return Err(Error::InvalidArgument(format!(
            "gaussian kernel size must be odd and positive, got {s}"
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("gaussian sigma must be positive, got {sigma}")));
    }
    let numel: usize = sizes.iter().product();
    let mut weights = Vec::with_capacity(numel);
    let mut coords = vec![0usize; sizes.len()];
    for _ in 0..numel {
        let dist2: f64 = coords
            .iter()
            .zip(sizes)
            .map(|(&i, &s)| {
                let d = i as f64 - (s / 2) as f64;
                d * d
            })
            .sum();
        weights.push((-dist2 / (2.0 * sigma * sigma)).exp());
        for d in (0..sizes.len()).rev() {
            coords[d] += 1;
            if coords[d] < sizes[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(GaussianKernel { sizes: sizes.to_vec(), sigma, weights })
}

impl GaussianKernel {
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Convolve one spatial volume with the kernel, replicating border
    /// values so edge mass is not attenuated.
    fn smooth(&self, input: &[f64], spatial: &[usize]) -> Vec<f64> {
        debug_assert_eq!(self.sizes.len(), spatial.len());
        debug_assert_eq!(input.len(), spatial.iter().product::<usize>());
        let flat = |coords: &[isize]| -> usize {
            coords.iter().zip(spatial).fold(0usize, |acc, (&c, &s)| {
                let clamped = c.clamp(0, s as isize - 1) as usize;
                acc * s + clamped
            })
        };
        let numel = input.len();
        let mut out = vec![0.0f64; numel];
        let mut oc = vec![0usize; spatial.len()];
        for slot in out.iter_mut() {
            let mut kc = vec![0usize; self.sizes.len()];
            let mut acc = 0.0;
            for &w in &self.weights {
                let coords: Vec<isize> = oc
                    .iter()
                    .zip(&kc)
                    .zip(&self.sizes)
                    .map(|((&o, &k), &s)| o as isize + k as isize - (s / 2) as isize)
                    .collect();
                acc += w * input[flat(&coords)];
                for d in (0..kc.len()).rev() {
                    kc[d] += 1;
                    if kc[d] < self.sizes[d] {
                        break;
                    }
                    kc[d] = 0;
                }
            }
            *slot = acc;
            for d in (0..oc.len()).rev() {
                oc[d] += 1;
                if oc[d] < spatial[d] {
                    break;
                }
                oc[d] = 0;
            }
        }
        out
    }
}

/// Loss attention: compare the two streams' hard predictions (channel
/// argmax, first index on ties) voxel by voxel and emit weight 1 where
/// they disagree, 0 where they agree. With a kernel, the binary map is
/// smoothed by replicate-padded convolution. The result is symmetric in
/// its arguments and is fed as voxel weights to the weighted loss of
/// *both* streams.
pub fn loss_attention<F: Scalar>(
    p_logits: &Tensor<F>,
    phat_logits: &Tensor<F>,
    kernel: Option<&GaussianKernel>,
) -> Result<DisagreementMap<F>> {
    if p_logits.shape() != phat_logits.shape() {
        return Err(Error::ShapeMismatch(format!(
            "loss attention needs equal prediction shapes, got {:?} vs {:?}",
            p_logits.shape(),
            phat_logits.shape()
        )));
    }
    let shape = p_logits.shape();
    if shape.len() < 3 {
        return Err(Error::ShapeMismatch(format!(
            "loss attention expects [B, C, spatial…], got {shape:?}"
        )));
    }
    let (batch, classes) = (shape[0], shape[1]);
    let spatial = &shape[2..];
    let sp_len: usize = spatial.iter().product();
    if let Some(k) = kernel {
        if k.sizes().len() != spatial.len() {
            return Err(Error::ShapeMismatch(format!(
                "kernel rank {} does not match spatial rank {}",
                k.sizes().len(),
                spatial.len()
            )));
        }
    }

    let argmax = |data: &[F], b: usize, v: usize| -> usize {
        let mut best = 0usize;
        let mut best_v = data[b * classes * sp_len + v];
        for c in 1..classes {
            let x = data[(b * classes + c) * sp_len + v];
            if x > best_v {
                best_v = x;
                best = c;
            }
        }
        best
    };

    let mut out: Vec<F> = Vec::with_capacity(batch * sp_len);
    for b in 0..batch {
        let mut binary = vec![0.0f64; sp_len];
        for (v, slot) in binary.iter_mut().enumerate() {
            if argmax(p_logits.data(), b, v) != argmax(phat_logits.data(), b, v) {
                *slot = 1.0;
            }
        }
        let smoothed = match kernel {
            Some(k) => k.smooth(&binary, spatial),
            None => binary,
        };
        out.extend(smoothed.into_iter().map(F::from_f64));
    }

    let mut out_shape = vec![batch, 1];
    out_shape.extend_from_slice(spatial);
    Ok(DisagreementMap { values: Tensor::new(out_shape, out)? })
}

/// Spatial attention: a two-conv transform of the fused features into a
/// per-voxel gate in (0,1), shared across channels.
///
/// `gate = sigmoid(conv₃(relu(conv₃(fused))))` with channel widths
/// `C → C/2 → 1`; the final bias starts at 2.0 so the gate opens near
/// 0.88 and cannot silence the streams at initialization.
#[derive(Debug, Clone)]
pub struct SpatialAttention<F: Scalar> {
    pub conv1: ConvParams<F>,
    pub conv2: ConvParams<F>,
}

impl<F: Scalar> SpatialAttention<F> {
    pub fn new(channels: usize, spatial_rank: usize, rng: &mut impl Rng) -> Result<Self> {
        if channels < 2 {
            return Err(Error::InvalidArgument(format!(
                "spatial attention needs at least 2 channels, got {channels}"
            )));
        }
        let mid = channels / 2;
        let conv1 = ConvParams::init(ConvSpec::uniform(channels, mid, 3, 1, 1, spatial_rank)?, rng);
        let mut conv2 = ConvParams::init(ConvSpec::uniform(mid, 1, 3, 1, 1, spatial_rank)?, rng);
        conv2.b.data_mut().fill(F::from_f64(GATE_BIAS));
        Ok(SpatialAttention { conv1, conv2 })
    }

    /// Gate map `[B, 1, spatial…]` plus the tape handles of the trainable
    /// parameters in visiting order.
    pub fn forward(&self, tape: &mut Tape<F>, fused: Val) -> Result<(Val, Vec<Val>)> {
        let (h, w1, b1) = self.conv1.forward(tape, fused)?;
        let h = tape.relu(h)?;
        let (z, w2, b2) = self.conv2.forward(tape, h)?;
        let gate = tape.sigmoid(z)?;
        Ok((gate, vec![w1, b1, w2, b2]))
    }
}

impl<F: Scalar> VisitParams<F> for SpatialAttention<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.conv1.visit_mut(&format!("{prefix}.conv1"), f);
        self.conv2.visit_mut(&format!("{prefix}.conv2"), f);
    }
}

/// Final gate-layer bias: gates start near sigmoid(2) ≈ 0.88, almost
/// open, so no feature is silenced before training has said anything.
pub const GATE_BIAS: f64 = 2.0;

/// Grid extent per spatial axis for the channel descriptor.
pub const CA_GRID: usize = 2;

/// Channel reduction ratio of the gate bottleneck.
pub const CA_REDUCTION: usize = 4;

/// Channel attention: a per-channel gate in (0,1) from a gridded max
/// descriptor.
///
/// Each channel is summarized by the mean over a coarse grid of
/// cell-maxima (max keeps a strong activation visible, the grid keeps
/// locality, the mean keeps scale). The descriptor feeds a two-layer
/// bottleneck `C → C/4 → C` ending in a sigmoid; the gate broadcasts over
/// all spatial positions.
#[derive(Debug, Clone)]
pub struct ChannelAttention<F: Scalar> {
    pub fc1: LinearParams<F>,
    pub fc2: LinearParams<F>,
    channels: usize,
}

impl<F: Scalar> ChannelAttention<F> {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument("channel attention needs channels > 0".into()));
        }
        let mid = (channels / CA_REDUCTION).max(1);
        let fc1 = LinearParams::init(channels, mid, 0.0, rng);
        let fc2 = LinearParams::init(mid, channels, GATE_BIAS, rng);
        Ok(ChannelAttention { fc1, fc2, channels })
    }

    /// Gate `[B, C, 1…]` (singleton spatial dims for broadcasting) plus
    /// the tape handles of the trainable parameters in visiting order.
    pub fn forward(&self, tape: &mut Tape<F>, fused: Val) -> Result<(Val, Vec<Val>)> {
        let shape = tape.shape(fused).to_vec();
        if shape.len() < 3 || shape[1] != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "channel attention built for C={} got input {shape:?}",
                self.channels
            )));
        }
        let cells = tape.grid_max(fused, CA_GRID)?;
        let descriptor = tape.spatial_mean(cells)?; // [B, C]
        let (h, w1, b1) = self.fc1.forward(tape, descriptor)?;
        let h = tape.relu(h)?;
        let (z, w2, b2) = self.fc2.forward(tape, h)?;
        let gate = tape.sigmoid(z)?;
        let mut gate_shape = vec![shape[0], self.channels];
        gate_shape.extend(std::iter::repeat(1).take(shape.len() - 2));
        let gate = tape.reshape(gate, &gate_shape)?;
        Ok((gate, vec![w1, b1, w2, b2]))
    }
}

impl<F: Scalar> VisitParams<F> for ChannelAttention<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        self.fc1.visit(&format!("{prefix}.fc1"), f);
        self.fc2.visit(&format!("{prefix}.fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.fc1.visit_mut(&format!("{prefix}.fc1"), f);
        self.fc2.visit_mut(&format!("{prefix}.fc2"), f);
    }
}

/// Parameters of the label-noise diffusion model: each voxel label flips
/// with probability `mu`, and a unit's gradient is polluted when any
/// voxel inside its receptive field (area `rho²`, discounted by `tau`)
/// flipped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseDiffusionParams {
    mu: f64,
    tau: f64,
}

impl NoiseDiffusionParams {
    pub fn new(mu: f64, tau: f64) -> Result<Self> {
        if !(0.0..0.5).contains(&mu) {
            return Err(Error::InvalidArgument(format!(
                "flip probability must satisfy 0 ≤ mu < 0.5, got {mu}"
            )));
        }
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!("scaling factor must be positive, got {tau}")));
        }
        Ok(NoiseDiffusionParams { mu, tau })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

impl Default for NoiseDiffusionParams {
    /// The bench setting used throughout the examples: 10% flips, τ=0.1.
    fn default() -> Self {
        NoiseDiffusionParams { mu: 0.1, tau: 0.1 }
    }
}

/// Probability that a unit with receptive field `rho` receives at least
/// one mislabeled voxel's gradient: `1 − (1−μ)^(τ·ρ²)`.
pub fn noise_probability(params: &NoiseDiffusionParams, rho: usize) -> f64 {
    let exponent = params.tau * (rho * rho) as f64;
    1.0 - (1.0 - params.mu).powf(exponent)
}

/// Attention family recommended for a site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionFamily {
    /// Parameter-free loss gating; only ever at the loss itself.
    Loss,
    /// Per-voxel gate; for sites where most gradients are still clean.
    Spatial,
    /// Per-channel gate; for sites where voxel-level trust is hopeless.
    Channel,
}

impl fmt::Display for AttentionFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AttentionFamily::Loss => "LA",
            AttentionFamily::Spatial => "SA",
            AttentionFamily::Channel => "CA",
        };
        f.write_str(s)
    }
}

/// One row of the placement report.
#[derive(Debug, Clone)]
pub struct SitePlacement {
    pub site_id: String,
    pub layer_index: usize,
    pub rho: usize,
    pub prob: f64,
    pub family: AttentionFamily,
}

/// Per-site noise probabilities and recommended attention families.
#[derive(Debug, Clone)]
pub struct PlacementReport {
    pub sites: Vec<SitePlacement>,
    pub threshold: f64,
}

/// Default probability threshold above which per-voxel gating is
/// considered pointless and channel gating is recommended.
pub const PLACEMENT_THRESHOLD: f64 = 0.5;

/// For every marked site, compute the receptive field ρ, the noise
/// probability, and the recommended family: SA while the probability
/// stays below `threshold`, CA once it exceeds it. The loss itself is
/// always a row, always LA (it sees single voxels, ρ = 1 territory, and
/// needs no parameters).
pub fn placement_report(
    arch: &ArchitectureSpec,
    params: &NoiseDiffusionParams,
    threshold: f64,
) -> Result<PlacementReport> {
    arch.validate()?;
    let mut sites = Vec::new();
    for (layer_index, site_id) in arch.sites() {
        let rho = arch.receptive_field(layer_index)?;
        let prob = noise_probability(params, rho);
        let family =
            if prob < threshold { AttentionFamily::Spatial } else { AttentionFamily::Channel };
        sites.push(SitePlacement { site_id, layer_index, rho, prob, family });
    }
    let loss_rho = arch.receptive_field(arch.layers.len())?;
    sites.push(SitePlacement {
        site_id: "loss".into(),
        layer_index: arch.layers.len(),
        rho: loss_rho,
        prob: noise_probability(params, loss_rho),
        family: AttentionFamily::Loss,
    });
    Ok(PlacementReport { sites, threshold })
}

impl fmt::Display for PlacementReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>5} {:>6} {:>10}  family", "site", "layer", "rho", "p(noisy)")?;
        for s in &self.sites {
            writeln!(
                f,
                "{:<12} {:>5} {:>6} {:>10.4}  {}",
                s.site_id, s.layer_index, s.rho, s.prob, s.family
            )?;
        }
        write!(f, "threshold {}", self.threshold)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check_multi, Tape};
    use crate::layers::LayerSpec;
    use crate::test_rng;

    fn logits_for_classes<F: Scalar>(classes: usize, hard: &[usize]) -> Tensor<F> {
        // [1, classes, len] with a clear winner per voxel.
        let len = hard.len();
        let mut data = vec![F::zero(); classes * len];
        for (v, &c) in hard.iter().enumerate() {
            data[c * len + v] = F::one();
        }
        Tensor::new(vec![1, classes, len], data).unwrap()
    }

    #[test]
    fn identical_predictions_give_zero_weights() {
        let p = logits_for_classes::<f64>(3, &[0, 1, 2, 1]);
        let map = loss_attention(&p, &p.clone(), None).unwrap();
        assert_eq!(map.values().shape(), &[1, 1, 4]);
        assert!(map.weights().iter().all(|w| *w == 0.0));
        assert_eq!(map.active_fraction(), 0.0);
    }

    #[test]
    fn binary_map_marks_disagreements() {
        let p = logits_for_classes::<f64>(2, &[1, 0, 1]);
        let q = logits_for_classes::<f64>(2, &[1, 1, 1]);
        let map = loss_attention(&p, &q, None).unwrap();
        assert_eq!(map.weights(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn disagreement_is_symmetric_bit_exact() {
        let mut rng = test_rng(11);
        let p = Tensor::<f64>::uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
        let q = Tensor::<f64>::uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
        let k = gaussian_kernel(&[3, 3], 0.5).unwrap();
        let ab = loss_attention(&p, &q, Some(&k)).unwrap();
        let ba = loss_attention(&q, &p, Some(&k)).unwrap();
        assert_eq!(ab.values().data(), ba.values().data());
    }

    #[test]
    fn argmax_tie_breaks_to_first_index() {
        // Voxel 0 ties between classes 0 and 1 in p; q clearly picks 1.
        let p = Tensor::new(vec![1, 2, 1], vec![1.0f64, 1.0]).unwrap();
        let q = Tensor::new(vec![1, 2, 1], vec![0.0f64, 1.0]).unwrap();
        let map = loss_attention(&p, &q, None).unwrap();
        assert_eq!(map.weights(), &[1.0]);
    }

    #[test]
    fn degenerate_kernel_is_identity() {
        let k = gaussian_kernel(&[1], 1.0).unwrap();
        assert_eq!(k.weights(), &[1.0]);
    }

    #[test]
    fn kernel_size_three_matches_direct_evaluation() {
        // Direct evaluation: w ∝ [exp(−1/(2σ²)), 1, exp(−1/(2σ²))].
        let k = gaussian_kernel(&[3], 0.5).unwrap();
        let e = (-2.0f64).exp();
        let s = 1.0 + 2.0 * e;
        let expect = [e / s, 1.0 / s, e / s];
        for (a, b) in k.weights().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn kernel_normalizes_and_reflects() {
        let k = gaussian_kernel(&[3, 3], 0.8).unwrap();
        let sum: f64 = k.weights().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        let w = k.weights();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(w[i * 3 + j], w[(2 - i) * 3 + (2 - j)]);
                assert_eq!(w[i * 3 + j], w[j * 3 + i]);
            }
        }
    }

    #[test]
    fn even_or_zero_kernel_sizes_are_rejected() {
        assert!(gaussian_kernel(&[2], 0.5).is_err());
        assert!(gaussian_kernel(&[3, 4], 0.5).is_err());
        assert!(gaussian_kernel(&[0], 0.5).is_err());
        assert!(gaussian_kernel(&[3], 0.0).is_err());
    }

    #[test]
    fn smoothing_spreads_an_impulse_and_preserves_mass() {
        // One disagreeing voxel in the middle of a 7×7 map.
        let mut p_hard = vec![0usize; 49];
        p_hard[24] = 1;
        let p = logits_for_classes::<f64>(2, &p_hard);
        let q = logits_for_classes::<f64>(2, &[0; 49]);
        let p = Tensor::new(vec![1, 2, 7, 7], p.into_data()).unwrap();
        let q = Tensor::new(vec![1, 2, 7, 7], q.into_data()).unwrap();
        let k = gaussian_kernel(&[3, 3], 0.5).unwrap();
        let map = loss_attention(&p, &q, Some(&k)).unwrap();
        let w = map.values().data();
        let mass: f64 = w.iter().sum();
        assert!((mass - 1.0).abs() < 1e-6, "mass {mass}");
        // Center keeps the kernel's central weight; diagonal neighbors get
        // the corner weight; voxels outside the 3×3 neighborhood get none.
        assert!((w[3 * 7 + 3] - k.weights()[4]).abs() < 1e-12);
        assert!((w[2 * 7 + 2] - k.weights()[0]).abs() < 1e-12);
        assert_eq!(w[0], 0.0);
    }

    #[test]
    fn replicate_padding_keeps_corner_mass() {
        // A symmetric kernel with replicate padding loses no mass even at
        // the corner: clamped taps re-read the border voxel.
        let mut p_hard = vec![0usize; 25];
        p_hard[0] = 1;
        let p = logits_for_classes::<f64>(2, &p_hard);
        let q = logits_for_classes::<f64>(2, &[0; 25]);
        let p = Tensor::new(vec![1, 2, 5, 5], p.into_data()).unwrap();
        let q = Tensor::new(vec![1, 2, 5, 5], q.into_data()).unwrap();
        let k = gaussian_kernel(&[3, 3], 0.5).unwrap();
        let map = loss_attention(&p, &q, Some(&k)).unwrap();
        let mass: f64 = map.values().data().iter().sum();
        assert!((mass - 1.0).abs() < 1e-6, "corner mass {mass}");
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let p = logits_for_classes::<f64>(2, &[0, 1]);
        let q = logits_for_classes::<f64>(2, &[0, 1, 1]);
        assert!(loss_attention(&p, &q, None).is_err());
        let k = gaussian_kernel(&[3, 3], 0.5).unwrap();
        assert!(loss_attention(&p, &p.clone(), Some(&k)).is_err()); // rank 1 map vs 2D kernel
    }

    #[test]
    fn spatial_gate_is_uniform_when_final_conv_is_zeroed() {
        let mut rng = test_rng(5);
        let mut sa = SpatialAttention::<f64>::new(4, 2, &mut rng).unwrap();
        sa.conv2.w.data_mut().fill(0.0);
        sa.conv2.b.data_mut().fill(0.7);
        let x = Tensor::uniform(&[2, 4, 5, 5], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let (gate, _) = sa.forward(&mut tape, xv).unwrap();
        assert_eq!(tape.shape(gate), &[2, 1, 5, 5]);
        let expect = 1.0 / (1.0 + (-0.7f64).exp());
        for g in tape.value(gate) {
            assert!((g - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn fresh_gates_start_nearly_open() {
        let mut rng = test_rng(6);
        let mut sa = SpatialAttention::<f64>::new(4, 2, &mut rng).unwrap();
        sa.conv2.w.data_mut().fill(0.0);
        let mut ca = ChannelAttention::<f64>::new(8, &mut rng).unwrap();
        ca.fc2.w.data_mut().fill(0.0);
        let x = Tensor::uniform(&[1, 4, 6, 6], -1.0, 1.0, &mut rng);
        let y = Tensor::uniform(&[1, 8, 6, 6], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let yv = tape.constant(&y);
        let (sg, _) = sa.forward(&mut tape, xv).unwrap();
        let (cg, _) = ca.forward(&mut tape, yv).unwrap();
        for g in tape.value(sg).iter().chain(tape.value(cg)) {
            assert!((g - 0.8808).abs() < 1e-4, "gate {g}");
        }
    }

    #[test]
    fn spatial_attention_rejects_single_channel() {
        let mut rng = test_rng(7);
        assert!(SpatialAttention::<f64>::new(1, 2, &mut rng).is_err());
    }

    #[test]
    fn channel_gate_shape_and_range() {
        let mut rng = test_rng(8);
        let ca = ChannelAttention::<f64>::new(6, &mut rng).unwrap();
        let x = Tensor::uniform(&[2, 6, 4, 4, 4], -2.0, 2.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let (gate, vals) = ca.forward(&mut tape, xv).unwrap();
        assert_eq!(tape.shape(gate), &[2, 6, 1, 1, 1]);
        assert_eq!(vals.len(), 4);
        for g in tape.value(gate) {
            assert!(*g > 0.0 && *g < 1.0);
        }
    }

    #[test]
    fn equal_channels_with_symmetric_weights_gate_equally() {
        let mut rng = test_rng(9);
        let mut ca = ChannelAttention::<f64>::new(8, &mut rng).unwrap();
        ca.fc1.w.data_mut().fill(0.3);
        ca.fc1.b.data_mut().fill(0.1);
        ca.fc2.w.data_mut().fill(-0.2);
        ca.fc2.b.data_mut().fill(0.5);
        // All channels carry the same plane.
        let plane: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut data = Vec::new();
        for _ in 0..8 {
            data.extend_from_slice(&plane);
        }
        let x = Tensor::new(vec![1, 8, 4, 4], data).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let (gate, _) = ca.forward(&mut tape, xv).unwrap();
        let g = tape.value(gate);
        for v in g {
            assert_eq!(*v, g[0]);
        }
    }

    #[test]
    fn channel_gate_is_permutation_equivariant() {
        let mut rng = test_rng(10);
        let ca = ChannelAttention::<f64>::new(4, &mut rng).unwrap();
        let x = Tensor::uniform(&[1, 4, 4, 4], -1.0, 1.0, &mut rng);
        let perm = [2usize, 0, 3, 1];

        let mut permuted = ca.clone();
        let mid = permuted.fc1.w.shape()[0];
        for h in 0..mid {
            for (i, &pi) in perm.iter().enumerate() {
                permuted.fc1.w.data_mut()[h * 4 + i] = ca.fc1.w.data()[h * 4 + pi];
            }
        }
        for (i, &pi) in perm.iter().enumerate() {
            for h in 0..mid {
                permuted.fc2.w.data_mut()[i * mid + h] = ca.fc2.w.data()[pi * mid + h];
            }
            permuted.fc2.b.data_mut()[i] = ca.fc2.b.data()[pi];
        }
        let sp = 16usize;
        let mut xp = x.clone();
        for (i, &pi) in perm.iter().enumerate() {
            let src = x.data()[pi * sp..(pi + 1) * sp].to_vec();
            xp.data_mut()[i * sp..(i + 1) * sp].copy_from_slice(&src);
        }

        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let xpv = tape.constant(&xp);
        let (g, _) = ca.forward(&mut tape, xv).unwrap();
        let (gp, _) = permuted.forward(&mut tape, xpv).unwrap();
        let g = tape.value(g).to_vec();
        let gp = tape.value(gp).to_vec();
        for (i, &pi) in perm.iter().enumerate() {
            assert!((gp[i] - g[pi]).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_attention_gradcheck() {
        let mut rng = test_rng(12);
        let x = Tensor::<f64>::uniform(&[1, 4, 5, 5], -1.0, 1.0, &mut rng);
        let sa = SpatialAttention::<f64>::new(4, 2, &mut rng).unwrap();
        let inputs = vec![
            x,
            sa.conv1.w.clone(),
            sa.conv1.b.clone(),
            sa.conv2.w.clone(),
            sa.conv2.b.clone(),
        ];
        let spec1 = sa.conv1.spec.clone();
        let spec2 = sa.conv2.spec.clone();
        let max_err = grad_check_multi(
            |tape, vals| {
                let h = tape.conv(vals[0], vals[1], vals[2], &spec1)?;
                let h = tape.relu(h)?;
                let z = tape.conv(h, vals[3], vals[4], &spec2)?;
                let gate = tape.sigmoid(z)?;
                let gated = tape.mul(vals[0], gate)?;
                tape.sum(gated)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(max_err < 1e-6, "rel err {max_err}");
    }

    #[test]
    fn channel_attention_gradcheck() {
        let mut rng = test_rng(13);
        let x = Tensor::<f64>::uniform(&[1, 4, 4, 4], -1.0, 1.0, &mut rng);
        let ca = ChannelAttention::<f64>::new(4, &mut rng).unwrap();
        let inputs =
            vec![x, ca.fc1.w.clone(), ca.fc1.b.clone(), ca.fc2.w.clone(), ca.fc2.b.clone()];
        let max_err = grad_check_multi(
            |tape, vals| {
                let cells = tape.grid_max(vals[0], CA_GRID)?;
                let d = tape.spatial_mean(cells)?;
                let h = tape.linear(d, vals[1], vals[2])?;
                let h = tape.relu(h)?;
                let z = tape.linear(h, vals[3], vals[4])?;
                let gate = tape.sigmoid(z)?;
                let gate = tape.reshape(gate, &[1, 4, 1, 1])?;
                let gated = tape.mul(vals[0], gate)?;
                tape.sum(gated)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(max_err < 1e-6, "rel err {max_err}");
    }

    #[test]
    fn noise_params_are_validated() {
        assert!(NoiseDiffusionParams::new(0.5, 0.1).is_err());
        assert!(NoiseDiffusionParams::new(-0.01, 0.1).is_err());
        assert!(NoiseDiffusionParams::new(0.1, 0.0).is_err());
        assert!(NoiseDiffusionParams::new(0.0, 0.1).is_ok());
        assert!(NoiseDiffusionParams::new(0.49, 2.0).is_ok());
    }

    #[test]
    fn noise_probability_matches_published_working_points() {
        let p = NoiseDiffusionParams::default();
        assert!((noise_probability(&p, 4) - 0.1551).abs() < 1e-4);
        assert!(1.0 - noise_probability(&p, 52) < 1e-12);
        assert!(1.0 - noise_probability(&p, 64) < 1e-12);
    }

    #[test]
    fn zero_flip_rate_means_zero_probability() {
        let p = NoiseDiffusionParams::new(0.0, 0.7).unwrap();
        for rho in 1..60 {
            assert_eq!(noise_probability(&p, rho), 0.0);
        }
    }

    #[test]
    fn noise_probability_is_monotone_in_every_argument() {
        let mus = [0.0, 0.05, 0.1, 0.2, 0.3, 0.45];
        let taus = [0.01, 0.1, 0.5, 1.0];
        for &tau in &taus {
            for &mu in &mus {
                let p = NoiseDiffusionParams::new(mu, tau).unwrap();
                let mut prev = 0.0;
                for rho in 1..40 {
                    let v = noise_probability(&p, rho);
                    assert!(v >= prev, "rho: {v} < {prev}");
                    prev = v;
                }
            }
        }
        for &tau in &taus {
            for rho in [1, 3, 10] {
                let mut prev = -1.0;
                for &mu in &mus {
                    let p = NoiseDiffusionParams::new(mu, tau).unwrap();
                    let v = noise_probability(&p, rho);
                    assert!(v >= prev);
                    prev = v;
                }
            }
        }
        for &mu in &mus {
            for rho in [1, 3, 10] {
                let mut prev = -1.0;
                for &tau in &taus {
                    let p = NoiseDiffusionParams::new(mu, tau).unwrap();
                    let v = noise_probability(&p, rho);
                    assert!(v >= prev);
                    prev = v;
                }
            }
        }
    }

    #[test]
    fn placement_for_the_bench_preset() {
        let arch = ArchitectureSpec::preset("small2d", 3).unwrap();
        let report =
            placement_report(&arch, &NoiseDiffusionParams::default(), PLACEMENT_THRESHOLD)
                .unwrap();
        let families: Vec<_> = report.sites.iter().map(|s| s.family).collect();
        assert_eq!(
            families,
            [
                AttentionFamily::Channel,
                AttentionFamily::Channel,
                AttentionFamily::Spatial,
                AttentionFamily::Loss
            ]
        );
        assert_eq!(report.sites[3].rho, 1);
        let text = report.to_string();
        assert!(text.contains("site1") && text.contains("SA") && text.contains("CA"));
    }

    #[test]
    fn shallow_site_with_small_field_gets_spatial_gating() {
        // Site whose receptive field is 4: pool then conv.
        let arch = ArchitectureSpec {
            name: "toy".into(),
            in_channels: 1,
            num_classes: 2,
            input_spatial: vec![8, 8],
            layers: vec![
                LayerSpec::Site { id: "s1".into() },
                LayerSpec::Conv { out_channels: 2, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::MaxPool { window: 2, stride: 2 },
            ],
        };
        assert_eq!(arch.receptive_field(0).unwrap(), 4);
        let report =
            placement_report(&arch, &NoiseDiffusionParams::default(), PLACEMENT_THRESHOLD)
                .unwrap();
        assert_eq!(report.sites[0].family, AttentionFamily::Spatial);
        assert!((report.sites[0].prob - 0.1551).abs() < 1e-4);
    }

    #[test]
    fn zero_noise_recommends_spatial_everywhere() {
        let arch = ArchitectureSpec::preset("small2d", 3).unwrap();
        let quiet = NoiseDiffusionParams::new(0.0, 0.1).unwrap();
        let report = placement_report(&arch, &quiet, PLACEMENT_THRESHOLD).unwrap();
        for s in &report.sites {
            assert_eq!(s.prob, 0.0);
            if s.site_id != "loss" {
                assert_eq!(s.family, AttentionFamily::Spatial);
            }
        }
    }
}
