//! The two-stream deep attention network: two identically-shaped
//! segmentation streams trained jointly, with gradient-filtering
//! attention gates at marked feature sites and a disagreement-driven
//! weighting of the loss itself.
//!
//! Both streams share one [`ArchitectureSpec`] but never share weight
//! storage. At every marked site the streams' features are fused by
//! addition, a gate in (0,1) is computed from the fusion, and the same
//! gate multiplies both streams. The per-site gate family is chosen by
//! the label-noise diffusion model: spatial gates where most gradients
//! are still clean, channel gates where voxel-level trust is hopeless,
//! and the parameter-free loss attention at the loss.

use crate::attention::{
    gaussian_kernel, loss_attention, placement_report, AttentionFamily, ChannelAttention,
    GaussianKernel, NoiseDiffusionParams, SitePlacement, SpatialAttention, PLACEMENT_THRESHOLD,
};
use crate::autodiff::{Tape, Tensor, Val};
use crate::data::LabelVolume;
use crate::distill::{harden, Predictor};
use crate::layers::{
    ArchitectureSpec, BatchStats, BnParams, ConvParams, ConvSpec, LayerSpec, VisitParams,
};
use crate::metrics::mean_foreground_dice;
use crate::{seeded_rng, Error, Result, Scalar};
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

/// Batch-norm epsilon used by every normalization layer in a stream.
pub const BN_EPS: f64 = 1e-5;

/// Leading bytes of a checkpoint file.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DANCKPT1";

pub(crate) fn join(prefix: &str, tail: &str) -> String {
    if prefix.is_empty() {
        tail.to_string()
    } else {
        format!("{prefix}.{tail}")
    }
}

/// Whether a forward pass uses batch statistics (training) or the frozen
/// running statistics (inference).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// (layer index, unit index) of a batch-norm whose statistics were
/// captured during a training forward pass.
pub(crate) type BnKey = (usize, usize);

#[derive(Debug, Clone)]
struct DenseUnit<F: Scalar> {
    bn: BnParams<F>,
    conv: ConvParams<F>,
}

#[derive(Debug, Clone)]
enum LayerParams<F: Scalar> {
    Conv(ConvParams<F>),
    Bn(BnParams<F>),
    Dense(Vec<DenseUnit<F>>),
    Stateless,
}

/// One stream's weights, mirroring the architecture layer for layer.
#[derive(Debug, Clone)]
pub struct StreamParams<F: Scalar> {
    layers: Vec<LayerParams<F>>,
}

impl<F: Scalar> StreamParams<F> {
    /// Fresh parameters for every parameterized layer, drawn from `rng`.
    pub fn init(arch: &ArchitectureSpec, rng: &mut impl Rng) -> Result<Self> {
        let rank = arch.spatial_rank();
        let mut c = arch.in_channels;
        let mut layers = Vec::with_capacity(arch.layers.len());
        for layer in &arch.layers {
            let lp = match layer {
                LayerSpec::Conv { out_channels, kernel, stride, padding } => {
                    let spec =
                        ConvSpec::uniform(c, *out_channels, *kernel, *stride, *padding, rank)?;
                    c = *out_channels;
                    LayerParams::Conv(ConvParams::init(spec, rng))
                }
                LayerSpec::BatchNorm => LayerParams::Bn(BnParams::init(c, BN_EPS)),
                LayerSpec::DenseBlock(db) => {
                    let mut units = Vec::with_capacity(db.units);
                    for _ in 0..db.units {
                        let bn = BnParams::init(c, BN_EPS);
                        let conv =
                            ConvParams::init(ConvSpec::uniform(c, db.growth, 3, 1, 1, rank)?, rng);
                        units.push(DenseUnit { bn, conv });
                        c += db.growth;
                    }
                    LayerParams::Dense(units)
                }
                _ => LayerParams::Stateless,
            };
            layers.push(lp);
        }
        Ok(StreamParams { layers })
    }

    /// Run one layer, pushing any parameters on the tape under
    /// `prefix.layer{i}...` names (appended to `handles` with their
    /// handles) and capturing batch statistics in training mode.
    fn forward_layer(
        &self,
        tape: &mut Tape<F>,
        prefix: &str,
        index: usize,
        spec: &LayerSpec,
        x: Val,
        mode: Mode,
        handles: &mut Vec<(String, Val)>,
        stats: &mut Vec<(BnKey, BatchStats<F>)>,
    ) -> Result<Val> {
        let base = format!("{prefix}.layer{index}");
        match (&self.layers[index], spec) {
            (LayerParams::Conv(p), LayerSpec::Conv { .. }) => {
                let (y, w, b) = p.forward(tape, x)?;
                handles.push((format!("{base}.w"), w));
                handles.push((format!("{base}.b"), b));
                Ok(y)
            }
            (LayerParams::Bn(p), LayerSpec::BatchNorm) => match mode {
                Mode::Train => {
                    let (y, g, b, st) = p.forward_train(tape, x)?;
                    handles.push((format!("{base}.gamma"), g));
                    handles.push((format!("{base}.beta"), b));
                    stats.push(((index, 0), st));
                    Ok(y)
                }
                Mode::Eval => p.forward_eval(tape, x),
            },
            (LayerParams::Dense(units), LayerSpec::DenseBlock(_)) => {
                let mut cat = x;
                for (u, unit) in units.iter().enumerate() {
                    let h = match mode {
                        Mode::Train => {
                            let (y, g, b, st) = unit.bn.forward_train(tape, cat)?;
                            handles.push((format!("{base}.unit{u}.bn.gamma"), g));
                            handles.push((format!("{base}.unit{u}.bn.beta"), b));
                            stats.push(((index, u), st));
                            y
                        }
                        Mode::Eval => unit.bn.forward_eval(tape, cat)?,
                    };
                    let h = tape.relu(h)?;
                    let (y, w, b) = unit.conv.forward(tape, h)?;
                    handles.push((format!("{base}.unit{u}.conv.w"), w));
                    handles.push((format!("{base}.unit{u}.conv.b"), b));
                    cat = tape.concat(&[cat, y], 1)?;
                }
                Ok(cat)
            }
            (LayerParams::Stateless, LayerSpec::Relu) => tape.relu(x),
            (LayerParams::Stateless, LayerSpec::MaxPool { window, stride }) => {
                tape.maxpool(x, *window, *stride)
            }
            (LayerParams::Stateless, LayerSpec::AvgPool { window, stride }) => {
                tape.avgpool(x, *window, *stride)
            }
            (LayerParams::Stateless, LayerSpec::Upsample { factor }) => {
                tape.upsample_nearest(x, *factor)
            }
            (LayerParams::Stateless, LayerSpec::Site { .. }) => Ok(x),
            _ => Err(Error::InvalidArgument(
                "stream parameters do not match the architecture they were built for".into(),
            )),
        }
    }

    /// Standalone single-stream forward — the ungated baseline that a
    /// fully-ablated DAN stream must match bit for bit.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        arch: &ArchitectureSpec,
        x: Val,
        mode: Mode,
    ) -> Result<Val> {
        Ok(self.forward_collect(tape, arch, x, mode, "s")?.0)
    }

    /// Standalone forward that also hands back the named parameter
    /// handles and captured batch statistics — what a training loop
    /// needs.
    pub(crate) fn forward_collect(
        &self,
        tape: &mut Tape<F>,
        arch: &ArchitectureSpec,
        x: Val,
        mode: Mode,
        prefix: &str,
    ) -> Result<(Val, Vec<(String, Val)>, Vec<(BnKey, BatchStats<F>)>)> {
        let (mut handles, mut stats) = (Vec::new(), Vec::new());
        let mut h = x;
        for (i, spec) in arch.layers.iter().enumerate() {
            h = self.forward_layer(tape, prefix, i, spec, h, mode, &mut handles, &mut stats)?;
        }
        Ok((h, handles, stats))
    }

    fn visit_layer(&self, index: usize, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        let base = format!("{prefix}.layer{index}");
        match &self.layers[index] {
            LayerParams::Conv(p) => p.visit(&base, f),
            LayerParams::Bn(p) => p.visit(&base, f),
            LayerParams::Dense(units) => {
                for (u, unit) in units.iter().enumerate() {
                    unit.bn.visit(&format!("{base}.unit{u}.bn"), f);
                    unit.conv.visit(&format!("{base}.unit{u}.conv"), f);
                }
            }
            LayerParams::Stateless => {}
        }
    }

    fn visit_layer_mut(
        &mut self,
        index: usize,
        prefix: &str,
        f: &mut dyn FnMut(String, &mut Tensor<F>),
    ) {
        let base = format!("{prefix}.layer{index}");
        match &mut self.layers[index] {
            LayerParams::Conv(p) => p.visit_mut(&base, f),
            LayerParams::Bn(p) => p.visit_mut(&base, f),
            LayerParams::Dense(units) => {
                for (u, unit) in units.iter_mut().enumerate() {
                    unit.bn.visit_mut(&format!("{base}.unit{u}.bn"), f);
                    unit.conv.visit_mut(&format!("{base}.unit{u}.conv"), f);
                }
            }
            LayerParams::Stateless => {}
        }
    }

    /// Fold captured batch statistics into the running averages. Called
    /// after the optimizer step so the statistics describe the weights
    /// that produced them.
    pub(crate) fn apply_bn_updates(&mut self, stats: &[(BnKey, BatchStats<F>)], momentum: F) {
        for ((layer, unit), st) in stats {
            match &mut self.layers[*layer] {
                LayerParams::Bn(p) => p.apply_update(st, momentum),
                LayerParams::Dense(units) => units[*unit].bn.apply_update(st, momentum),
                _ => {}
            }
        }
    }
}

impl<F: Scalar> VisitParams<F> for StreamParams<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        for i in 0..self.layers.len() {
            self.visit_layer(i, prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        for i in 0..self.layers.len() {
            self.visit_layer_mut(i, prefix, f);
        }
    }
}

#[derive(Debug, Clone)]
enum GateModule<F: Scalar> {
    Channel(ChannelAttention<F>),
    Spatial(SpatialAttention<F>),
}

/// A gated feature site: where it sits, why that family was chosen, and
/// the gate's parameters.
#[derive(Debug, Clone)]
pub struct FeatureSite<F: Scalar> {
    pub placement: SitePlacement,
    gate: GateModule<F>,
}

/// Construction knobs for a [`TwoStreamDan`].
#[derive(Debug, Clone)]
pub struct DanOptions {
    /// Label-noise diffusion model driving the site family choice.
    pub noise: NoiseDiffusionParams,
    /// Pollution probability above which a site gets a channel gate.
    pub threshold: f64,
    /// Loss-attention smoothing as (kernel size per axis, sigma);
    /// `None` keeps the binary disagreement map.
    pub la_smoothing: Option<(usize, f64)>,
}

impl Default for DanOptions {
    fn default() -> Self {
        DanOptions {
            noise: NoiseDiffusionParams::default(),
            threshold: PLACEMENT_THRESHOLD,
            la_smoothing: Some((3, 0.5)),
        }
    }
}

/// Everything a forward pass produced: per-stream logits, the fused
/// probabilities, per-site mean gate values, the named tape handles of
/// all trainable parameters, and any batch statistics.
pub struct ForwardPass<F: Scalar> {
    pub p: Val,
    pub phat: Val,
    pub fused_probs: Val,
    /// Mean gate value per feature site (1.0 for disabled sites).
    pub gate_means: Vec<f64>,
    pub handles: Vec<(String, Val)>,
    bn_stats_a: Vec<(BnKey, BatchStats<F>)>,
    bn_stats_b: Vec<(BnKey, BatchStats<F>)>,
}

/// The two-stream network.
#[derive(Debug, Clone)]
pub struct TwoStreamDan<F: Scalar> {
    arch: ArchitectureSpec,
    a: StreamParams<F>,
    b: StreamParams<F>,
    sites: Vec<FeatureSite<F>>,
    la_kernel: Option<GaussianKernel>,
    /// One flag per feature site plus a final flag for loss attention.
    enabled: Vec<bool>,
}

impl<F: Scalar> TwoStreamDan<F> {
    /// Build with stream seeds `seed` and `seed+1` (different initial
    /// weights make disagreement informative) and gate seed `seed+2`.
    pub fn new(arch: ArchitectureSpec, seed: u64, options: &DanOptions) -> Result<Self> {
        Self::with_stream_seeds(arch, seed, seed.wrapping_add(1), seed.wrapping_add(2), options)
    }

    /// Build with explicit per-stream and gate seeds. Equal stream seeds
    /// give byte-identical streams — useful for symmetry tests, useless
    /// for disagreement.
    pub fn with_stream_seeds(
        arch: ArchitectureSpec,
        seed_a: u64,
        seed_b: u64,
        seed_gates: u64,
        options: &DanOptions,
    ) -> Result<Self> {
        arch.validate_segmentation()?;
        let report = placement_report(&arch, &options.noise, options.threshold)?;
        let shapes = arch.shapes()?;
        let a = StreamParams::init(&arch, &mut seeded_rng(seed_a))?;
        let b = StreamParams::init(&arch, &mut seeded_rng(seed_b))?;
        let mut gate_rng = seeded_rng(seed_gates);
        let mut sites = Vec::new();
        for placement in report.sites {
            if placement.family == AttentionFamily::Loss {
                continue;
            }
            let channels = shapes[placement.layer_index].0;
            let gate = match placement.family {
                AttentionFamily::Channel => {
                    GateModule::Channel(ChannelAttention::new(channels, &mut gate_rng)?)
                }
                AttentionFamily::Spatial => GateModule::Spatial(SpatialAttention::new(
                    channels,
                    arch.spatial_rank(),
                    &mut gate_rng,
                )?),
                AttentionFamily::Loss => unreachable!("filtered above"),
            };
            sites.push(FeatureSite { placement, gate });
        }
        let la_kernel = match options.la_smoothing {
            Some((k, sigma)) => Some(gaussian_kernel(&vec![k; arch.spatial_rank()], sigma)?),
            None => None,
        };
        let enabled = vec![true; sites.len() + 1];
        Ok(TwoStreamDan { arch, a, b, sites, la_kernel, enabled })
    }

    pub fn arch(&self) -> &ArchitectureSpec {
        &self.arch
    }

    pub fn sites(&self) -> &[FeatureSite<F>] {
        &self.sites
    }

    /// Total attention sites including the loss site.
    pub fn num_sites(&self) -> usize {
        self.sites.len() + 1
    }

    /// 1-based numbers of the currently enabled sites (the loss site is
    /// the last number).
    pub fn enabled_sites(&self) -> Vec<usize> {
        self.enabled
            .iter()
            .enumerate()
            .filter_map(|(i, &on)| on.then_some(i + 1))
            .collect()
    }

    /// A copy with exactly the listed sites (1-based; `num_sites()` is
    /// the loss site) enabled; every other site behaves as identity.
    pub fn ablate(&self, enabled_sites: &[usize]) -> Result<TwoStreamDan<F>> {
        let n = self.num_sites();
        let mut mask = vec![false; n];
        for &s in enabled_sites {
            if s == 0 || s > n {
                return Err(Error::InvalidArgument(format!(
                    "site {s} out of range: this network has sites 1..={n}"
                )));
            }
            mask[s - 1] = true;
        }
        let mut out = self.clone();
        out.enabled = mask;
        Ok(out)
    }

    /// Run both streams in lockstep over a `[B, C_in, spatial…]` batch
    /// already on the tape, gating at every enabled site.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<F>,
        x: Val,
        mode: Mode,
    ) -> Result<ForwardPass<F>> {
        let xsh = tape.shape(x).to_vec();
        let mut expect = vec![0, self.arch.in_channels];
        expect.extend_from_slice(&self.arch.input_spatial);
        if xsh.len() != expect.len() || xsh[1..] != expect[1..] || xsh[0] == 0 {
            return Err(Error::ShapeMismatch(format!(
                "input {xsh:?} does not match [B>0, {}, {:?}]",
                self.arch.in_channels, self.arch.input_spatial
            )));
        }
        let mut handles = Vec::new();
        let mut bn_stats_a = Vec::new();
        let mut bn_stats_b = Vec::new();
        let mut gate_means = Vec::with_capacity(self.sites.len());
        let (mut ha, mut hb) = (x, x);
        let mut cursor = 0usize;
        for (i, spec) in self.arch.layers.iter().enumerate() {
            ha = self.a.forward_layer(tape, "a", i, spec, ha, mode, &mut handles, &mut bn_stats_a)?;
            hb = self.b.forward_layer(tape, "b", i, spec, hb, mode, &mut handles, &mut bn_stats_b)?;
            if matches!(spec, LayerSpec::Site { .. }) {
                let site = &self.sites[cursor];
                if self.enabled[cursor] {
                    let fused = tape.add(ha, hb)?;
                    let (gate, gate_handles) = match &site.gate {
                        GateModule::Channel(ca) => ca.forward(tape, fused)?,
                        GateModule::Spatial(sa) => sa.forward(tape, fused)?,
                    };
                    let names = gate_param_names(&site.placement.site_id, &site.gate);
                    handles.extend(names.into_iter().zip(gate_handles));
                    let gv = tape.value(gate);
                    let mean =
                        gv.iter().map(|v| v.as_f64()).sum::<f64>() / gv.len() as f64;
                    gate_means.push(mean);
                    ha = tape.mul(ha, gate)?;
                    hb = tape.mul(hb, gate)?;
                } else {
                    gate_means.push(1.0);
                }
                cursor += 1;
            }
        }
        let fused = tape.add(ha, hb)?;
        let fused_probs = tape.softmax(fused, 1)?;
        Ok(ForwardPass {
            p: ha,
            phat: hb,
            fused_probs,
            gate_means,
            handles,
            bn_stats_a,
            bn_stats_b,
        })
    }

    /// Joint loss: weigh every voxel by the streams' smoothed
    /// disagreement (or 1.0 if loss attention is disabled), then sum the
    /// weighted cross-entropies of both streams. Returns the loss value's
    /// handle and the mean loss-attention weight.
    pub fn compute_loss(
        &self,
        tape: &mut Tape<F>,
        p: Val,
        phat: Val,
        labels: &[usize],
    ) -> Result<(Val, f64)> {
        let la_on = *self.enabled.last().expect("mask never empty");
        let sh = tape.shape(p).to_vec();
        let n_vox = sh[0] * sh[2..].iter().product::<usize>();
        let (weights, la_mean) = if la_on {
            let pt = tape.tensor(p);
            let pht = tape.tensor(phat);
            let map = loss_attention(&pt, &pht, self.la_kernel.as_ref())?;
            let w = map.weights().to_vec();
            let mean = w.iter().map(|v| v.as_f64()).sum::<f64>() / w.len().max(1) as f64;
            (w, mean)
        } else {
            (vec![F::one(); n_vox], 1.0)
        };
        let l1 = tape.weighted_softmax_ce(p, labels, &weights)?;
        let l2 = tape.weighted_softmax_ce(phat, labels, &weights)?;
        let loss = tape.add(l1, l2)?;
        Ok((loss, la_mean))
    }

    /// Fused class probabilities `[C, spatial…]` for one single-channel
    /// intensity volume, using frozen batch-norm statistics.
    pub fn fused_probabilities(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        if self.arch.in_channels != 1 {
            return Err(Error::InvalidArgument(
                "volume prediction requires a single-channel architecture".into(),
            ));
        }
        if x.shape() != self.arch.input_spatial.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "volume shape {:?} does not match architecture input {:?}",
                x.shape(),
                self.arch.input_spatial
            )));
        }
        let mut shape = vec![1, 1];
        shape.extend_from_slice(x.shape());
        let batched = Tensor::new(shape, x.data().to_vec())?;
        let mut tape = Tape::new();
        let xb = tape.constant(&batched);
        let pass = self.forward_on_tape(&mut tape, xb, Mode::Eval)?;
        let probs = tape.tensor(pass.fused_probs);
        let mut out_shape = vec![self.arch.num_classes];
        out_shape.extend_from_slice(&self.arch.input_spatial);
        Tensor::new(out_shape, probs.into_data())
    }

    /// Segment one volume: argmax of the fused probabilities, first
    /// index on ties.
    pub fn predict(&self, x: &Tensor<F>) -> Result<LabelVolume> {
        let probs = self.fused_probabilities(x)?;
        harden(&probs, self.arch.num_classes)
    }

    /// SGD with momentum over shuffled minibatches. Deterministic for a
    /// fixed seed: identical models, data and config produce bit-identical
    /// logs. Validation Dice is measured at epoch ends (or every
    /// `validate_every` iterations) and at the final iteration.
    pub fn train(
        &mut self,
        train_set: &[(Tensor<F>, LabelVolume)],
        val_set: &[(Tensor<F>, LabelVolume)],
        config: &TrainConfig,
    ) -> Result<TrainLog> {
        config.validate()?;
        if train_set.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        if self.arch.in_channels != 1 {
            return Err(Error::InvalidArgument(
                "training expects single-channel intensity volumes".into(),
            ));
        }
        for (x, y) in train_set.iter().chain(val_set) {
            if x.shape() != self.arch.input_spatial.as_slice()
                || y.shape() != self.arch.input_spatial.as_slice()
            {
                return Err(Error::ShapeMismatch(format!(
                    "sample shapes {:?}/{:?} do not match architecture input {:?}",
                    x.shape(),
                    y.shape(),
                    self.arch.input_spatial
                )));
            }
            if y.classes() > self.arch.num_classes {
                return Err(Error::LabelOutOfRange {
                    label: y.classes() - 1,
                    classes: self.arch.num_classes,
                });
            }
        }

        let n = train_set.len();
        let bs = config.batch_size.min(n);
        let mut rng = seeded_rng(config.seed);
        let mut order: Vec<usize> = (0..n).collect();
        let mut cursor = n; // forces a shuffle before the first batch
        let mut optimizer = OptimizerState::new(config.momentum);
        let mut log = TrainLog::new(self.num_sites());

        for iter in 0..config.max_iters {
            if cursor + bs > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + bs];
            cursor += bs;
            let epoch_end = cursor + bs > n;

            let (batch, labels) = build_batch(train_set, idx, &self.arch)?;
            let mut tape = Tape::new();
            let xb = tape.constant(&batch);
            let pass = self.forward_on_tape(&mut tape, xb, Mode::Train)?;
            let (loss, la_mean) = self.compute_loss(&mut tape, pass.p, pass.phat, &labels)?;
            let loss_value = tape.value(loss)[0].as_f64();
            if !loss_value.is_finite() {
                return Err(Error::Diverged { iter, what: format!("loss = {loss_value}") });
            }
            tape.backward(loss)?;

            let mut grads: HashMap<String, Vec<F>> = HashMap::with_capacity(pass.handles.len());
            for (name, handle) in &pass.handles {
                grads.insert(name.clone(), tape.grad_or_zeros(*handle));
            }
            optimizer.step(self, &grads, F::from_f64(config.lr_at(iter)))?;
            self.a.apply_bn_updates(&pass.bn_stats_a, F::from_f64(config.bn_momentum));
            self.b.apply_bn_updates(&pass.bn_stats_b, F::from_f64(config.bn_momentum));

            let validate_now = !val_set.is_empty()
                && (iter + 1 == config.max_iters
                    || (config.validate_every > 0 && (iter + 1) % config.validate_every == 0)
                    || (config.validate_every == 0 && epoch_end));
            let val_dice = if validate_now {
                let mut acc = 0.0;
                for (x, y) in val_set {
                    acc += mean_foreground_dice(&self.predict(x)?, y)?;
                }
                Some(acc / val_set.len() as f64)
            } else {
                None
            };

            let mut gate_means = pass.gate_means.clone();
            gate_means.push(la_mean);
            log.records.push(TrainRecord { iter, loss: loss_value, gate_means, val_dice });
        }
        Ok(log)
    }

    /// Serialize every named tensor — weights and batch-norm running
    /// statistics — as float32, in visiting order.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        save_params(self, path)
    }

    /// Load a checkpoint saved by a model of the same architecture. Every
    /// stored tensor must match a named tensor of this model in shape;
    /// missing, extra, or misshapen tensors are [`Error::Checkpoint`].
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        load_params(self, path)
    }
}

/// Serialize every named tensor a model visits as float32, in visiting
/// order: the magic, then per tensor a length-prefixed name, the rank,
/// the dims, and the little-endian payload.
pub fn save_params<F: Scalar, M: VisitParams<F> + ?Sized>(model: &M, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = CHECKPOINT_MAGIC.to_vec();
    model.visit("", &mut |name: String, t: &Tensor<F>| {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    });
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Fill a model's named tensors from a checkpoint. Every stored tensor
/// must match a visited tensor in name and shape; missing, extra, or
/// misshapen tensors are [`Error::Checkpoint`].
pub fn load_params<F: Scalar, M: VisitParams<F> + ?Sized>(
    model: &mut M,
    path: &Path,
) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut stored = parse_checkpoint(&bytes, path)?;
    let mut problems: Vec<String> = Vec::new();
    model.visit_mut("", &mut |name: String, t: &mut Tensor<F>| {
        match stored.remove(&name) {
            None => problems.push(format!("missing tensor `{name}`")),
            Some((shape, data)) => {
                if shape != t.shape() {
                    problems.push(format!(
                        "tensor `{name}`: stored shape {shape:?}, model wants {:?}",
                        t.shape()
                    ));
                } else {
                    for (slot, v) in t.data_mut().iter_mut().zip(&data) {
                        *slot = F::from_f64(*v as f64);
                    }
                }
            }
        }
    });
    let mut extra: Vec<&String> = stored.keys().collect();
    extra.sort();
    for name in extra {
        problems.push(format!("unexpected tensor `{name}`"));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Checkpoint(problems.join("; ")))
    }
}

fn gate_param_names<F: Scalar>(site_id: &str, gate: &GateModule<F>) -> Vec<String> {
    let (p1, p2) = match gate {
        GateModule::Channel(_) => ("fc1", "fc2"),
        GateModule::Spatial(_) => ("conv1", "conv2"),
    };
    vec![
        format!("{site_id}.{p1}.w"),
        format!("{site_id}.{p1}.b"),
        format!("{site_id}.{p2}.w"),
        format!("{site_id}.{p2}.b"),
    ]
}

impl<F: Scalar> VisitParams<F> for TwoStreamDan<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        let mut cursor = 0usize;
        for (i, spec) in self.arch.layers.iter().enumerate() {
            self.a.visit_layer(i, &join(prefix, "a"), f);
            self.b.visit_layer(i, &join(prefix, "b"), f);
            if matches!(spec, LayerSpec::Site { .. }) {
                let site = &self.sites[cursor];
                let p = join(prefix, &site.placement.site_id);
                match &site.gate {
                    GateModule::Channel(ca) => ca.visit(&p, f),
                    GateModule::Spatial(sa) => sa.visit(&p, f),
                }
                cursor += 1;
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        let mut cursor = 0usize;
        for i in 0..self.arch.layers.len() {
            let is_site = matches!(self.arch.layers[i], LayerSpec::Site { .. });
            self.a.visit_layer_mut(i, &join(prefix, "a"), f);
            self.b.visit_layer_mut(i, &join(prefix, "b"), f);
            if is_site {
                let site = &mut self.sites[cursor];
                let p = join(prefix, &site.placement.site_id);
                match &mut site.gate {
                    GateModule::Channel(ca) => ca.visit_mut(&p, f),
                    GateModule::Spatial(sa) => sa.visit_mut(&p, f),
                }
                cursor += 1;
            }
        }
    }
}

impl Predictor for TwoStreamDan<f32> {
    fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    fn predict_probs(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.fused_probabilities(x)
    }
}

fn parse_checkpoint(
    bytes: &[u8],
    path: &Path,
) -> Result<HashMap<String, (Vec<usize>, Vec<f32>)>> {
    let truncated = |offset: usize| Error::Truncated { path: path.into(), offset: offset as u64 };
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { path: path.into(), expected: "DANCKPT1" });
    }
    let mut off = CHECKPOINT_MAGIC.len();
    let mut out = HashMap::new();
    let read_u32 = |bytes: &[u8], off: &mut usize| -> Result<u32> {
        let end = *off + 4;
        if end > bytes.len() {
            return Err(truncated(*off));
        }
        let v = u32::from_le_bytes(bytes[*off..end].try_into().expect("length checked"));
        *off = end;
        Ok(v)
    };
    while off < bytes.len() {
        let name_len = read_u32(bytes, &mut off)? as usize;
        if off + name_len > bytes.len() {
            return Err(truncated(off));
        }
        let name = std::str::from_utf8(&bytes[off..off + name_len])
            .map_err(|_| Error::Checkpoint(format!("tensor name at byte {off} is not UTF-8")))?
            .to_string();
        off += name_len;
        let rank = read_u32(bytes, &mut off)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(bytes, &mut off)? as usize);
        }
        let numel: usize = shape.iter().product();
        if off + numel * 4 > bytes.len() {
            return Err(truncated(off));
        }
        let mut data = Vec::with_capacity(numel);
        for k in 0..numel {
            let s = off + k * 4;
            data.push(f32::from_le_bytes(bytes[s..s + 4].try_into().expect("length checked")));
        }
        off += numel * 4;
        if out.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
    }
    Ok(out)
}

/// Momentum buffers, one per named trainable tensor.
#[derive(Debug, Clone)]
pub struct OptimizerState<F: Scalar> {
    momentum: f64,
    buffers: HashMap<String, Vec<F>>,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(momentum: f64) -> Self {
        OptimizerState { momentum, buffers: HashMap::new() }
    }

    /// One SGD-with-momentum step:
    /// `buf = momentum·buf + grad; w -= lr·buf` for every trainable
    /// tensor with a gradient entry. Buffer shapes mirror weight shapes.
    pub fn step<M: VisitParams<F> + ?Sized>(
        &mut self,
        model: &mut M,
        grads: &HashMap<String, Vec<F>>,
        lr: F,
    ) -> Result<()> {
        let m = F::from_f64(self.momentum);
        let buffers = &mut self.buffers;
        let mut problem: Option<String> = None;
        model.visit_mut("", &mut |name: String, t: &mut Tensor<F>| {
            if !t.requires_grad() || problem.is_some() {
                return;
            }
            let Some(g) = grads.get(&name) else { return };
            if g.len() != t.numel() {
                problem = Some(format!(
                    "gradient for `{name}` has {} entries, tensor has {}",
                    g.len(),
                    t.numel()
                ));
                return;
            }
            let buf = buffers.entry(name).or_insert_with(|| vec![F::zero(); g.len()]);
            let data = t.data_mut();
            for j in 0..g.len() {
                buf[j] = m * buf[j] + g[j];
                data[j] = data[j] - lr * buf[j];
            }
        });
        match problem {
            Some(p) => Err(Error::InvalidArgument(p)),
            None => Ok(()),
        }
    }
}

/// Hyperparameters of the optimization loop.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub max_iters: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// EMA factor for batch-norm running statistics.
    pub bn_momentum: f64,
    /// Validate every this many iterations; 0 = at epoch ends.
    pub validate_every: usize,
    /// Seed for the minibatch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale loop: 2000 iterations of batch-4 SGD, momentum 0.9,
    /// lr 0.05 halving at every quarter of the run.
    fn default() -> Self {
        TrainConfig {
            max_iters: 2000,
            batch_size: 4,
            learning_rate: 0.05,
            momentum: 0.9,
            bn_momentum: 0.9,
            validate_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "max_iters and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be finite and ≥ 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::InvalidArgument("momenta must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Learning rate at an iteration: halved at 25%, 50% and 75% of the
    /// run.
    pub fn lr_at(&self, iter: usize) -> f64 {
        let k = ((4 * iter) / self.max_iters.max(1)).min(3);
        self.learning_rate * 0.5f64.powi(k as i32)
    }
}

/// One training iteration's log line.
#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub iter: usize,
    pub loss: f64,
    /// Feature-site gates in site order, then the mean loss-attention
    /// weight.
    pub gate_means: Vec<f64>,
    pub val_dice: Option<f64>,
}

/// Complete training log, serializable as CSV.
#[derive(Debug, Clone)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    n_sites: usize,
}

impl TrainLog {
    pub fn new(n_sites: usize) -> Self {
        TrainLog { records: Vec::new(), n_sites }
    }

    pub fn header(&self) -> String {
        let mut h = String::from("iter,loss");
        for k in 1..=self.n_sites {
            let _ = write!(h, ",mean_gate_site{k}");
        }
        h.push_str(",val_dice");
        h
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for r in &self.records {
            let _ = write!(out, "{},{}", r.iter, r.loss);
            for g in &r.gate_means {
                let _ = write!(out, ",{g}");
            }
            match r.val_dice {
                Some(d) => {
                    let _ = write!(out, ",{d}");
                }
                None => out.push(','),
            }
            out.push('\n');
        }
        out
    }

    /// Final validation Dice, if any was measured.
    pub fn final_val_dice(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.val_dice)
    }

    /// Loss trajectory (for determinism comparisons).
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// Stack single-channel volumes into a `[B, 1, spatial…]` batch and
/// flatten their labels batch-major.
pub(crate) fn build_batch<F: Scalar>(
    set: &[(Tensor<F>, LabelVolume)],
    idx: &[usize],
    arch: &ArchitectureSpec,
) -> Result<(Tensor<F>, Vec<usize>)> {
    let sp_len: usize = arch.input_spatial.iter().product();
    let mut data = Vec::with_capacity(idx.len() * sp_len);
    let mut labels = Vec::with_capacity(idx.len() * sp_len);
    for &i in idx {
        let (x, y) = set
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("sample index {i} out of range")))?;
        data.extend_from_slice(x.data());
        labels.extend(y.data().iter().map(|&v| v as usize));
    }
    let mut shape = vec![idx.len(), 1];
    shape.extend_from_slice(&arch.input_spatial);
    Ok((Tensor::new(shape, data)?, labels))
}
