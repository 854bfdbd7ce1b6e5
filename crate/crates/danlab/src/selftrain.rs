//! The three-stage self-training pipeline: train teacher networks on
//! the (noisily) labeled fraction of a dataset, hierarchically distill
//! pseudo-labels for the unlabeled remainder, and retrain the two-stream
//! network on the union.
//!
//! Label scarcity is controlled by the labeled fraction ξ and annotation
//! quality by the flip probability μ, injected either voxelwise (iid) or
//! as connected blobs. The unlabeled subset's ground truth is kept out
//! of every training stage by construction — training consumes only
//! [`TrainingRecord`]s, whose provenance is logged per sample.

use crate::autodiff::{Tape, Tensor};
use crate::dan::{
    build_batch, join, load_params, save_params, DanOptions, Mode, OptimizerState, StreamParams,
    TrainConfig, TrainLog, TrainRecord, TwoStreamDan,
};
use crate::data::{write_volume, LabelVolume, Volume};
use crate::distill::{
    harden, hierarchical_distill, pseudo_label_quality, Aggregation, GeometricTransform,
    Predictor, TeacherSet,
};
use crate::layers::{ArchitectureSpec, VisitParams};
use crate::metrics::{dice, evaluate_volumes, mean_foreground_dice};
use crate::{seeded_rng, Error, Result, Scalar};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

/// How a dataset is divided into manually-labeled and unlabeled parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    /// Labeled fraction, in (0, 1].
    pub xi: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(xi: f64, seed: u64) -> Result<Self> {
        let spec = SplitSpec { xi, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.xi > 0.0 && self.xi <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "labeled fraction must lie in (0, 1], got {}",
                self.xi
            )));
        }
        Ok(())
    }
}

/// Disjoint, exhaustive index sets, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Partition `0..n` into round(ξ·n) labeled indices and the rest,
/// deterministically for a given seed.
pub fn split(n: usize, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least two samples to split, got {n}"
        )));
    }
    let n_labeled = (spec.xi * n as f64).round() as usize;
    if n_labeled == 0 {
        return Err(Error::InvalidArgument(format!(
            "labeled fraction {} of {n} samples rounds to an empty labeled set",
            spec.xi
        )));
    }
    let n_labeled = n_labeled.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(spec.seed));
    let mut labeled = order[..n_labeled].to_vec();
    let mut unlabeled = order[n_labeled..].to_vec();
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok(Split { labeled, unlabeled })
}

/// Spatial arrangement of injected label errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    /// Each voxel flips independently.
    Iid,
    /// Errors are planted as balls with radii drawn uniformly from the
    /// inclusive range, never touching each other, until the flipped
    /// mass reaches the target.
    Blob { radius: (usize, usize) },
}

/// Label corruption recipe: every flipped voxel's label is resampled
/// uniformly among the other classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// Flip probability, in [0, 0.5).
    pub mu: f64,
    pub mode: NoiseMode,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn iid(mu: f64, seed: u64) -> Result<Self> {
        let spec = NoiseSpec { mu, mode: NoiseMode::Iid, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn blob(mu: f64, radius: (usize, usize), seed: u64) -> Result<Self> {
        let spec = NoiseSpec { mu, mode: NoiseMode::Blob { radius }, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.mu) {
            return Err(Error::InvalidArgument(format!(
                "flip probability must lie in [0, 0.5), got {}",
                self.mu
            )));
        }
        if let NoiseMode::Blob { radius: (lo, hi) } = self.mode {
            if lo == 0 || lo > hi {
                return Err(Error::InvalidArgument(format!(
                    "blob radius range must satisfy 1 ≤ lo ≤ hi, got {lo}..={hi}"
                )));
            }
        }
        Ok(())
    }
}

/// Which voxels were corrupted and what they became. Applying the mask
/// to the clean labels reproduces the noisy labels exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlipMask {
    shape: Vec<usize>,
    replacements: Vec<Option<u8>>,
}

impl FlipMask {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Number of flipped voxels.
    pub fn count(&self) -> usize {
        self.replacements.iter().filter(|r| r.is_some()).count()
    }

    /// Flipped voxels as a fraction of all voxels.
    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.replacements.len().max(1) as f64
    }

    pub fn is_flipped(&self, voxel: usize) -> bool {
        self.replacements[voxel].is_some()
    }

    /// Reproduce the noisy labels from the clean ones.
    pub fn apply(&self, clean: &LabelVolume) -> Result<LabelVolume> {
        if clean.shape() != self.shape {
            return Err(Error::ShapeMismatch(format!(
                "mask shape {:?} vs labels {:?}",
                self.shape,
                clean.shape()
            )));
        }
        let data = clean
            .data()
            .iter()
            .zip(&self.replacements)
            .map(|(&y, r)| r.unwrap_or(y))
            .collect();
        LabelVolume::from_parts(self.shape.clone(), clean.classes(), data)
    }

    /// Does `noisy = apply(clean)` hold exactly?
    pub fn explains(&self, clean: &LabelVolume, noisy: &LabelVolume) -> bool {
        self.apply(clean).map(|v| v == *noisy).unwrap_or(false)
    }
}

/// Resample a label uniformly among the other classes.
fn flip_label(y: u8, classes: usize, rng: &mut impl Rng) -> u8 {
    let mut v = rng.gen_range(0..classes - 1) as u8;
    if v >= y {
        v += 1;
    }
    v
}

/// Corrupt labels per the recipe, returning the noisy volume and the
/// mask that exactly explains it. Deterministic for a given seed.
pub fn inject_noise(labels: &LabelVolume, spec: &NoiseSpec) -> Result<(LabelVolume, FlipMask)> {
    spec.validate()?;
    let classes = labels.classes();
    let n = labels.numel();
    let mut rng = seeded_rng(spec.seed);
    let mut replacements: Vec<Option<u8>> = vec![None; n];

    match spec.mode {
        NoiseMode::Iid => {
            for (v, &y) in labels.data().iter().enumerate() {
                if rng.gen::<f64>() < spec.mu {
                    replacements[v] = Some(flip_label(y, classes, &mut rng));
                }
            }
        }
        NoiseMode::Blob { radius } => {
            plant_blobs(labels, spec.mu, radius, &mut rng, &mut replacements)?;
        }
    }

    let mask = FlipMask { shape: labels.shape().to_vec(), replacements };
    let noisy = mask.apply(labels)?;
    Ok((noisy, mask))
}

/// Plant non-touching balls of flipped voxels until the flipped mass
/// lands in [0.9μ, 1.1μ] of the volume. Balls whose Moore neighborhood
/// touches an existing blob — or that would overshoot the upper bound —
/// are rejected and resampled.
fn plant_blobs(
    labels: &LabelVolume,
    mu: f64,
    (r_lo, r_hi): (usize, usize),
    rng: &mut impl Rng,
    replacements: &mut [Option<u8>],
) -> Result<()> {
    let shape = labels.shape();
    let rank = shape.len();
    let n = labels.numel();
    let classes = labels.classes();
    let lo_target = 0.9 * mu * n as f64;
    let hi_target = 1.1 * mu * n as f64;
    if lo_target <= 0.0 {
        return Ok(());
    }
    let strides: Vec<usize> = {
        let mut s = vec![1usize; rank];
        for d in (0..rank.saturating_sub(1)).rev() {
            s[d] = s[d + 1] * shape[d + 1];
        }
        s
    };
    let mut mass = 0usize;
    let mut rejections = 0usize;
    const MAX_REJECTIONS: usize = 10_000;
    while (mass as f64) < lo_target {
        if rejections > MAX_REJECTIONS {
            return Err(Error::Diverged {
                iter: rejections,
                what: format!(
                    "blob placement stalled at flip fraction {:.6} (target {mu}): \
                     no admissible ball fits the calibration window",
                    mass as f64 / n as f64
                ),
            });
        }
        let center: Vec<usize> = shape.iter().map(|&d| rng.gen_range(0..d)).collect();
        let r = rng.gen_range(r_lo..=r_hi);
        let ball = ball_voxels(&center, r, shape, &strides);
        if mass as f64 + ball.len() as f64 > hi_target
            || touches_existing(&ball, shape, &strides, replacements)
        {
            rejections += 1;
            continue;
        }
        for &v in &ball {
            replacements[v] = Some(flip_label(labels.data()[v], classes, rng));
        }
        mass += ball.len();
        rejections = 0;
    }
    Ok(())
}

/// Flat indices of the voxels within Euclidean distance `r` of the
/// center, clipped to the volume bounds.
fn ball_voxels(center: &[usize], r: usize, shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let lo: Vec<usize> = (0..rank).map(|d| center[d].saturating_sub(r)).collect();
    let hi: Vec<usize> = (0..rank).map(|d| (center[d] + r).min(shape[d] - 1)).collect();
    let mut out = Vec::new();
    let mut cur = lo.clone();
    loop {
        let dist2: usize = (0..rank)
            .map(|d| {
                let diff = cur[d].abs_diff(center[d]);
                diff * diff
            })
            .sum();
        if dist2 <= r * r {
            out.push((0..rank).map(|d| cur[d] * strides[d]).sum());
        }
        let mut d = rank;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            if cur[d] < hi[d] {
                cur[d] += 1;
                break;
            }
            cur[d] = lo[d];
        }
    }
}

/// Would this ball touch (even diagonally) an already-flipped voxel?
/// Keeping a one-voxel moat between blobs guarantees every flipped
/// connected component is exactly one planted ball.
fn touches_existing(
    ball: &[usize],
    shape: &[usize],
    strides: &[usize],
    replacements: &[Option<u8>],
) -> bool {
    let rank = shape.len();
    ball.iter().any(|&v| {
        let coord: Vec<usize> = (0..rank).map(|d| (v / strides[d]) % shape[d]).collect();
        let mut cur = vec![0usize; rank];
        let lo: Vec<usize> = (0..rank).map(|d| coord[d].saturating_sub(1)).collect();
        let hi: Vec<usize> = (0..rank).map(|d| (coord[d] + 1).min(shape[d] - 1)).collect();
        cur.copy_from_slice(&lo);
        loop {
            let idx: usize = (0..rank).map(|d| cur[d] * strides[d]).sum();
            if replacements[idx].is_some() {
                return true;
            }
            let mut d = rank;
            loop {
                if d == 0 {
                    return false;
                }
                d -= 1;
                if cur[d] < hi[d] {
                    cur[d] += 1;
                    break;
                }
                cur[d] = lo[d];
            }
        }
    })
}

/// Where a training label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// A (possibly noisy) manual annotation from the labeled fraction.
    Manual,
    /// A distilled pseudo-label.
    Pseudo,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Provenance::Manual => "manual",
            Provenance::Pseudo => "pseudo",
        })
    }
}

/// The only thing training stages are allowed to consume: an intensity
/// volume, the label to fit, and where that label came from. Ground
/// truth of unlabeled samples never becomes a record.
#[derive(Debug, Clone)]
pub struct TrainingRecord {
    pub index: usize,
    pub intensity: Tensor<f32>,
    pub label: LabelVolume,
    pub provenance: Provenance,
}

/// Per-sample label provenance, the pipeline's audit log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuditEntry {
    pub index: usize,
    pub provenance: Provenance,
}

/// A single segmentation stream trained with plain cross-entropy — the
/// baseline teacher variant without gates or loss attention.
#[derive(Debug, Clone)]
pub struct SingleStream<F: Scalar> {
    arch: ArchitectureSpec,
    params: StreamParams<F>,
}

impl<F: Scalar> SingleStream<F> {
    pub fn new(arch: ArchitectureSpec, seed: u64) -> Result<Self> {
        arch.validate_segmentation()?;
        let params = StreamParams::init(&arch, &mut seeded_rng(seed))?;
        Ok(SingleStream { arch, params })
    }

    pub fn arch(&self) -> &ArchitectureSpec {
        &self.arch
    }

    /// Minibatch SGD with momentum on the plain softmax cross-entropy.
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
        let n = train_set.len();
        let bs = config.batch_size.min(n);
        let mut rng = seeded_rng(config.seed);
        let mut order: Vec<usize> = (0..n).collect();
        let mut cursor = n;
        let mut optimizer = OptimizerState::new(config.momentum);
        let mut log = TrainLog::new(0);
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
            let (logits, handles, stats) =
                self.params.forward_collect(&mut tape, &self.arch, xb, Mode::Train, "s")?;
            let loss = tape.softmax_ce(logits, &labels)?;
            let loss_value = tape.value(loss)[0].as_f64();
            if !loss_value.is_finite() {
                return Err(Error::Diverged { iter, what: format!("loss = {loss_value}") });
            }
            tape.backward(loss)?;
            let mut grads: HashMap<String, Vec<F>> = HashMap::with_capacity(handles.len());
            for (name, handle) in &handles {
                grads.insert(name.clone(), tape.grad_or_zeros(*handle));
            }
            optimizer.step(self, &grads, F::from_f64(config.lr_at(iter)))?;
            self.params.apply_bn_updates(&stats, F::from_f64(config.bn_momentum));

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
            log.records.push(TrainRecord {
                iter,
                loss: loss_value,
                gate_means: Vec::new(),
                val_dice,
            });
        }
        Ok(log)
    }

    /// Class probabilities `[C, spatial…]` for one volume, using frozen
    /// batch-norm statistics.
    pub fn probabilities(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
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
        let (logits, _, _) =
            self.params.forward_collect(&mut tape, &self.arch, xb, Mode::Eval, "s")?;
        let probs = tape.softmax(logits, 1)?;
        let mut out_shape = vec![self.arch.num_classes];
        out_shape.extend_from_slice(&self.arch.input_spatial);
        Tensor::new(out_shape, tape.tensor(probs).into_data())
    }

    pub fn predict(&self, x: &Tensor<F>) -> Result<LabelVolume> {
        harden(&self.probabilities(x)?, self.arch.num_classes)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        save_params(self, path)
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        load_params(self, path)
    }
}

impl<F: Scalar> VisitParams<F> for SingleStream<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        self.params.visit(&join(prefix, "s"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.params.visit_mut(&join(prefix, "s"), f);
    }
}

impl Predictor for SingleStream<f32> {
    fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    fn predict_probs(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.probabilities(x)
    }
}

/// A trained teacher of either flavor.
enum Teacher {
    Dan(TwoStreamDan<f32>),
    Stream(SingleStream<f32>),
}

impl Teacher {
    fn predictor(&self) -> &dyn Predictor {
        match self {
            Teacher::Dan(m) => m,
            Teacher::Stream(m) => m,
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        match self {
            Teacher::Dan(m) => m.save_checkpoint(path),
            Teacher::Stream(m) => m.save_checkpoint(path),
        }
    }
}

/// Everything a pipeline run needs to know.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub arch: ArchitectureSpec,
    /// Labeled fraction ξ.
    pub xi: f64,
    /// Corruption of the manual labels.
    pub noise: NoiseSpec,
    pub split_seed: u64,
    /// Seed of the final model; teacher `t` uses
    /// `model_seed + 1000·(t+1)`.
    pub model_seed: u64,
    pub num_teachers: usize,
    /// Teachers are two-stream networks by default; this flag trains
    /// plain single streams instead.
    pub single_stream_teachers: bool,
    pub dan: DanOptions,
    pub teacher_train: TrainConfig,
    pub final_train: TrainConfig,
    /// Augmentations for the distillation stage.
    pub transforms: Vec<GeometricTransform>,
    pub aggregation: Aggregation,
}

impl PipelineConfig {
    /// Desk-scale defaults: ξ = 0.5, iid μ = 0.2, two teachers at 500
    /// iterations, final network at 1000, the full 12-fold augmentation.
    pub fn new(arch: ArchitectureSpec) -> Self {
        PipelineConfig {
            arch,
            xi: 0.5,
            noise: NoiseSpec { mu: 0.2, mode: NoiseMode::Iid, seed: 11 },
            split_seed: 5,
            model_seed: 40,
            num_teachers: 2,
            single_stream_teachers: false,
            dan: DanOptions::default(),
            teacher_train: TrainConfig { max_iters: 500, ..TrainConfig::default() },
            final_train: TrainConfig { max_iters: 1000, ..TrainConfig::default() },
            transforms: GeometricTransform::all12(),
            aggregation: Aggregation::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate_segmentation()?;
        SplitSpec::new(self.xi, self.split_seed)?;
        self.noise.validate()?;
        self.teacher_train.validate()?;
        self.final_train.validate()?;
        if self.num_teachers == 0 {
            return Err(Error::InvalidArgument("need at least one teacher".into()));
        }
        if self.transforms.is_empty() {
            return Err(Error::InvalidArgument(
                "distillation needs at least one transform".into(),
            ));
        }
        Ok(())
    }

    /// Resolved settings as `key=value` lines — the `config.txt` echo.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "arch={}", self.arch.name);
        let _ = writeln!(s, "classes={}", self.arch.num_classes);
        let _ = writeln!(
            s,
            "input={}",
            self.arch
                .input_spatial
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x")
        );
        let _ = writeln!(s, "xi={}", self.xi);
        let _ = writeln!(s, "noise_mu={}", self.noise.mu);
        let mode = match self.noise.mode {
            NoiseMode::Iid => "iid".to_string(),
            NoiseMode::Blob { radius: (lo, hi) } => format!("blob:{lo}..{hi}"),
        };
        let _ = writeln!(s, "noise_mode={mode}");
        let _ = writeln!(s, "noise_seed={}", self.noise.seed);
        let _ = writeln!(s, "split_seed={}", self.split_seed);
        let _ = writeln!(s, "model_seed={}", self.model_seed);
        let _ = writeln!(s, "num_teachers={}", self.num_teachers);
        let _ = writeln!(s, "single_stream_teachers={}", self.single_stream_teachers);
        let _ = writeln!(s, "teacher_iters={}", self.teacher_train.max_iters);
        let _ = writeln!(s, "final_iters={}", self.final_train.max_iters);
        let _ = writeln!(s, "batch_size={}", self.final_train.batch_size);
        let _ = writeln!(s, "learning_rate={}", self.final_train.learning_rate);
        let _ = writeln!(s, "transforms={}", self.transforms.len());
        let agg = match self.aggregation {
            Aggregation::HardVote => "hard_vote",
            Aggregation::MeanProbability => "mean_probability",
        };
        let _ = writeln!(s, "aggregation={agg}");
        s
    }
}

/// One long-format result row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub stage: String,
    pub item: String,
    pub metric: String,
    pub value: f64,
}

/// All measurements of a pipeline run, in long format.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    pub fn push(
        &mut self,
        stage: impl Into<String>,
        item: impl Into<String>,
        metric: impl Into<String>,
        value: f64,
    ) {
        self.rows.push(ReportRow {
            stage: stage.into(),
            item: item.into(),
            metric: metric.into(),
            value,
        });
    }

    /// The value of an exact (stage, item, metric) row.
    pub fn value(&self, stage: &str, item: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.stage == stage && r.item == item && r.metric == metric)
            .map(|r| r.value)
    }

    /// Mean of `metric` over all items of a stage.
    pub fn mean(&self, stage: &str, metric: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.stage == stage && r.metric == metric)
            .map(|r| r.value)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,item,metric,value\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.stage, r.item, r.metric, r.value);
        }
        out
    }
}

/// What a pipeline run returns beyond its on-disk artifacts.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub report: ExperimentReport,
    pub audit: Vec<AuditEntry>,
    pub split: Split,
}

/// An intensity volume paired with its labels — the dataset row every
/// pipeline entry point consumes.
pub type LabeledVolume = (Tensor<f32>, LabelVolume);

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn record_pairs(records: &[TrainingRecord]) -> Vec<(Tensor<f32>, LabelVolume)> {
    records.iter().map(|r| (r.intensity.clone(), r.label.clone())).collect()
}

/// Run the three stages into `run_dir`: config.txt, teachers/*.ckpt,
/// pseudo/*.lbl + manifest.csv, final.ckpt, report.csv. Aborts on the
/// first stage failure, naming the stage and keeping whatever artifacts
/// were already written.
pub fn run_pipeline(
    dataset: &[LabeledVolume],
    val_set: &[LabeledVolume],
    config: &PipelineConfig,
    run_dir: &Path,
) -> Result<PipelineOutcome> {
    config.validate()?;
    if val_set.is_empty() {
        return Err(Error::InvalidArgument(
            "pipeline needs a non-empty validation set".into(),
        ));
    }
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    write_text(&run_dir.join("config.txt"), &config.describe())?;

    let mut report = ExperimentReport::default();
    let val_pairs = val_set.to_vec();

    // Stage: split the dataset and corrupt the manual labels.
    let (split, labeled_records) = (|| -> Result<(Split, Vec<TrainingRecord>)> {
        let split = split(dataset.len(), &SplitSpec::new(config.xi, config.split_seed)?)?;
        let mut records = Vec::with_capacity(split.labeled.len());
        let mut flip_total = 0usize;
        let mut voxel_total = 0usize;
        for &i in &split.labeled {
            let spec = NoiseSpec { seed: config.noise.seed.wrapping_add(i as u64), ..config.noise };
            let (noisy, mask) = inject_noise(&dataset[i].1, &spec)?;
            flip_total += mask.count();
            voxel_total += dataset[i].1.numel();
            records.push(TrainingRecord {
                index: i,
                intensity: dataset[i].0.clone(),
                label: noisy,
                provenance: Provenance::Manual,
            });
        }
        report.push("split", "labeled", "count", split.labeled.len() as f64);
        report.push("split", "unlabeled", "count", split.unlabeled.len() as f64);
        report.push(
            "split",
            "labeled",
            "flip_fraction",
            flip_total as f64 / voxel_total.max(1) as f64,
        );
        Ok((split, records))
    })()
    .map_err(Error::in_stage("split"))?;

    // Stage: train the teachers on the noisy labeled fraction.
    let teachers = (|| -> Result<Vec<Teacher>> {
        let dir = run_dir.join("teachers");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let labeled_pairs = record_pairs(&labeled_records);
        let mut teachers = Vec::with_capacity(config.num_teachers);
        for t in 0..config.num_teachers {
            let seed = config.model_seed.wrapping_add(1000 * (t as u64 + 1));
            let mut tc = config.teacher_train.clone();
            tc.seed = tc.seed.wrapping_add(t as u64);
            let (log, teacher) = if config.single_stream_teachers {
                let mut m = SingleStream::new(config.arch.clone(), seed)?;
                let log = m.train(&labeled_pairs, &val_pairs, &tc)?;
                (log, Teacher::Stream(m))
            } else {
                let mut m = TwoStreamDan::new(config.arch.clone(), seed, &config.dan)?;
                let log = m.train(&labeled_pairs, &val_pairs, &tc)?;
                (log, Teacher::Dan(m))
            };
            teacher.save(&dir.join(format!("teacher{t}.ckpt")))?;
            report.push(
                "teachers",
                format!("teacher{t}"),
                "val_dice",
                log.final_val_dice().unwrap_or(f64::NAN),
            );
            teachers.push(teacher);
        }
        Ok(teachers)
    })()
    .map_err(Error::in_stage("teachers"))?;

    // Stage: distill pseudo-labels for the unlabeled fraction.
    let pseudo_records = (|| -> Result<Vec<TrainingRecord>> {
        if split.unlabeled.is_empty() {
            report.push("pseudo", "none", "skipped", 1.0);
            return Ok(Vec::new());
        }
        let dir = run_dir.join("pseudo");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let pseudo: Vec<(usize, LabelVolume)> = split
            .unlabeled
            .par_iter()
            .map(|&i| {
                let members: Vec<(&dyn Predictor, String)> = teachers
                    .iter()
                    .enumerate()
                    .map(|(t, teacher)| (teacher.predictor(), format!("teacher{t}")))
                    .collect();
                let set = TeacherSet::new(members)?;
                let labels = hierarchical_distill(
                    &set,
                    &dataset[i].0,
                    &config.transforms,
                    config.aggregation,
                )?;
                Ok((i, labels))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut manifest = String::from("index,file,mean_dice,flip_rate\n");
        let mut records = Vec::with_capacity(pseudo.len());
        for (i, labels) in pseudo {
            let file = format!("vol{i}.lbl");
            write_volume(&dir.join(&file), &Volume::Labels(labels.clone()))?;
            let quality = pseudo_label_quality(&labels, &dataset[i].1)?;
            let mean_dice =
                quality.dice.iter().sum::<f64>() / quality.dice.len().max(1) as f64;
            let _ = writeln!(manifest, "{i},{file},{mean_dice},{}", quality.flip_rate);
            report.push("pseudo", format!("vol{i}"), "mean_dice", mean_dice);
            report.push("pseudo", format!("vol{i}"), "flip_rate", quality.flip_rate);
            records.push(TrainingRecord {
                index: i,
                intensity: dataset[i].0.clone(),
                label: labels,
                provenance: Provenance::Pseudo,
            });
        }
        let overall = report.mean("pseudo", "mean_dice").unwrap_or(f64::NAN);
        report.push("pseudo", "all", "mean_dice", overall);
        write_text(&dir.join("manifest.csv"), &manifest)?;
        Ok(records)
    })()
    .map_err(Error::in_stage("pseudo"))?;

    // Stage: retrain the two-stream network on the union.
    let outcome = (|| -> Result<PipelineOutcome> {
        let mut union: Vec<&TrainingRecord> =
            labeled_records.iter().chain(&pseudo_records).collect();
        union.sort_by_key(|r| r.index);
        let audit: Vec<AuditEntry> = union
            .iter()
            .map(|r| AuditEntry { index: r.index, provenance: r.provenance })
            .collect();
        for entry in &audit {
            report.push(
                "audit",
                format!("vol{}", entry.index),
                "provenance_pseudo",
                matches!(entry.provenance, Provenance::Pseudo) as u8 as f64,
            );
        }
        let union_pairs: Vec<(Tensor<f32>, LabelVolume)> = union
            .iter()
            .map(|r| (r.intensity.clone(), r.label.clone()))
            .collect();
        let mut model = TwoStreamDan::new(config.arch.clone(), config.model_seed, &config.dan)?;
        let log = model.train(&union_pairs, &val_pairs, &config.final_train)?;
        model.save_checkpoint(&run_dir.join("final.ckpt"))?;
        report.push("final", "model", "val_dice", log.final_val_dice().unwrap_or(f64::NAN));

        for (j, (intensity, truth)) in val_set.iter().enumerate() {
            let pred = model.predict(intensity)?;
            for c in 1..truth.classes() {
                report.push(
                    "final",
                    format!("val{j}"),
                    format!("dice_class{c}"),
                    dice(&pred, truth, c)?,
                );
            }
            match evaluate_volumes(&pred, truth) {
                Ok(eval) => {
                    for m in &eval.per_class {
                        report.push(
                            "final",
                            format!("val{j}"),
                            format!("adb_class{}", m.class),
                            m.adb,
                        );
                        report.push(
                            "final",
                            format!("val{j}"),
                            format!("hdd_class{}", m.class),
                            m.hdd,
                        );
                    }
                    report.push("final", format!("val{j}"), "composite", eval.composite);
                }
                Err(Error::EmptyBoundary { .. }) => {
                    report.push("final", format!("val{j}"), "boundary_undefined", 1.0);
                }
                Err(e) => return Err(e),
            }
        }
        let mean_dice = {
            let per_val: Vec<f64> = (0..val_set.len())
                .map(|j| {
                    let item = format!("val{j}");
                    let vals: Vec<f64> = report
                        .rows
                        .iter()
                        .filter(|r| {
                            r.stage == "final"
                                && r.item == item
                                && r.metric.starts_with("dice_class")
                        })
                        .map(|r| r.value)
                        .collect();
                    vals.iter().sum::<f64>() / vals.len().max(1) as f64
                })
                .collect();
            per_val.iter().sum::<f64>() / per_val.len() as f64
        };
        report.push("final", "all", "mean_dice", mean_dice);
        if let Some(c) = report.mean("final", "composite") {
            report.push("final", "all", "mean_composite", c);
        }
        Ok(PipelineOutcome { report: ExperimentReport::default(), audit, split: split.clone() })
    })()
    .map_err(Error::in_stage("final"))?;

    write_text(&run_dir.join("report.csv"), &report.to_csv())?;
    Ok(PipelineOutcome { report, ..outcome })
}

/// One row of a labeled-fraction sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct XiSweepRow {
    pub xi: f64,
    pub teacher_dice: f64,
    /// `None` when ξ = 1 made distillation a no-op.
    pub pseudo_dice: Option<f64>,
    pub final_dice: f64,
}

/// Run the pipeline once per ξ (run directories `xi{value}` under
/// `root`), collecting the headline numbers.
pub fn xi_sweep(
    dataset: &[LabeledVolume],
    val_set: &[LabeledVolume],
    base: &PipelineConfig,
    xis: &[f64],
    root: &Path,
) -> Result<Vec<XiSweepRow>> {
    if xis.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one ξ value".into()));
    }
    let mut rows = Vec::with_capacity(xis.len());
    for &xi in xis {
        let config = PipelineConfig { xi, ..base.clone() };
        let outcome =
            run_pipeline(dataset, val_set, &config, &root.join(format!("xi{xi}")))?;
        rows.push(XiSweepRow {
            xi,
            teacher_dice: outcome.report.mean("teachers", "val_dice").unwrap_or(f64::NAN),
            pseudo_dice: outcome.report.value("pseudo", "all", "mean_dice"),
            final_dice: outcome.report.value("final", "all", "mean_dice").unwrap_or(f64::NAN),
        });
    }
    Ok(rows)
}

/// CSV for a ξ sweep: one row per ξ, empty pseudo column when skipped.
pub fn xi_sweep_csv(rows: &[XiSweepRow]) -> String {
    let mut out = String::from("xi,teacher_dice,pseudo_dice,final_dice\n");
    for r in rows {
        let pseudo = r.pseudo_dice.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{pseudo},{}", r.xi, r.teacher_dice, r.final_dice);
    }
    out
}

/// Shared settings of an ablation sweep: every variant trains the same
/// architecture from the same initialization on the same data and seed.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub arch: ArchitectureSpec,
    pub options: DanOptions,
    pub train: TrainConfig,
    pub model_seed: u64,
}

/// One trained ablation variant and its validation score.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    /// Enabled sites joined with `+`, or `none`.
    pub variant: String,
    pub sites: Vec<usize>,
    /// Mean foreground Dice on the validation set.
    pub score: f64,
}

/// Ablation results, one row per variant.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,score\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{}", r.variant, r.score);
        }
        out
    }
}

fn variant_name(sites: &[usize]) -> String {
    if sites.is_empty() {
        "none".to_string()
    } else {
        sites.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("+")
    }
}

/// The nested chain `{}`, `{S}`, `{S−1,S}`, …, `{1,…,S}`: attention
/// sites are added one at a time from the deepest (the loss) backwards.
pub fn default_chain(num_sites: usize) -> Vec<Vec<usize>> {
    (0..=num_sites)
        .map(|k| ((num_sites - k + 1)..=num_sites).collect())
        .collect()
}

/// Train one variant per subset — identical data, seeds, and initial
/// weights — and score each on the validation set.
pub fn ablation_sweep(
    train_set: &[(Tensor<f32>, LabelVolume)],
    val_set: &[(Tensor<f32>, LabelVolume)],
    config: &SweepConfig,
    subsets: &[Vec<usize>],
) -> Result<AblationTable> {
    if subsets.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one subset".into()));
    }
    if val_set.is_empty() {
        return Err(Error::InvalidArgument(
            "ablation needs a non-empty validation set".into(),
        ));
    }
    let base = TwoStreamDan::<f32>::new(config.arch.clone(), config.model_seed, &config.options)?;
    let mut rows = Vec::with_capacity(subsets.len());
    for sites in subsets {
        let mut model = base.ablate(sites)?;
        model.train(train_set, val_set, &config.train)?;
        let mut acc = 0.0;
        for (x, y) in val_set {
            acc += mean_foreground_dice(&model.predict(x)?, y)?;
        }
        rows.push(AblationRow {
            variant: variant_name(sites),
            sites: sites.clone(),
            score: acc / val_set.len() as f64,
        });
    }
    Ok(AblationTable { rows })
}
