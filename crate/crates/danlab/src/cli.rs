//! The `danlab` command-line front end.
//!
//! Seven subcommands cover the laboratory's workflow: `gen-data` writes a
//! synthetic dataset, `train` fits one two-stream network, `distill`
//! produces pseudo-labels from teacher checkpoints, `selftrain` runs the
//! full three-stage pipeline, `ablate` trains a chain of attention-site
//! subsets, `eval` scores prediction volumes against ground truth, and
//! `selfcheck` runs the built-in diagnostic suite.
//!
//! Conventions shared by every command:
//!
//! * exit code 0 on success, 1 on runtime failure, 2 on usage or
//!   validation errors; failures print one line to stderr;
//! * run directories are self-describing — the fully resolved
//!   configuration is echoed to `config.txt` and results land in
//!   `report.csv` (plus command-specific artifacts);
//! * stdout carries progress lines and, last, the path of the main
//!   report file; all data goes to files;
//! * `DANLAB_THREADS` caps the worker-thread count (default: hardware
//!   parallelism).

use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::attention::NoiseDiffusionParams;
use crate::autodiff::{grad_check, Tape, Tensor, Val};
use crate::config::{entry, RunConfig, SchemaEntry};
use crate::dan::{DanOptions, TrainConfig, TwoStreamDan, BN_EPS};
use crate::data::{
    generate, read_intensity, read_labels, write_volume, LabelVolume, Sample, SyntheticSpec,
    Volume,
};
use crate::distill::{
    hierarchical_distill, pseudo_label_quality, Aggregation, GeometricTransform, Predictor,
    TeacherSet,
};
use crate::layers::{ArchitectureSpec, BnParams, ConvParams, ConvSpec, LayerSpec};
use crate::metrics::{avg_boundary_distance, dice, hausdorff};
use crate::oracles::{adb_brute_force, dan_gradient_audit, hausdorff_brute_force, miniature_arch};
use crate::selftrain::{
    ablation_sweep, default_chain, inject_noise, run_pipeline, xi_sweep, xi_sweep_csv,
    ExperimentReport, LabeledVolume, NoiseMode, NoiseSpec, PipelineConfig, SingleStream,
    SweepConfig,
};
use crate::{seeded_rng, Error, Result};

#[derive(Parser)]
#[command(
    name = "danlab",
    version,
    about = "Desk-scale laboratory for segmentation training under noisy labels"
)]
struct CliArgs {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory (volumes, labels, index.csv).
    GenData(GenDataArgs),
    /// Train one two-stream network on a dataset directory.
    Train(CommonRun),
    /// Produce pseudo-labels from trained teacher checkpoints.
    Distill(DistillArgs),
    /// Run the three-stage self-training pipeline (optionally over several ξ).
    Selftrain(SelftrainArgs),
    /// Train a chain of attention-site subsets and tabulate their scores.
    Ablate(CommonRun),
    /// Score predicted label volumes against ground truth.
    Eval(EvalArgs),
    /// Run the built-in diagnostic suite (gradients, transforms, metrics).
    Selfcheck(SelfcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of volumes to generate.
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Spatial shape, e.g. 32x32 or 24x24x24 (each dim ≥ 16).
    #[arg(long, default_value = "32x32")]
    shape: String,
    /// Generator seed; equal seeds give byte-identical directories.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Standard deviation of the intensity noise.
    #[arg(long, default_value_t = 0.05)]
    noise_sigma: f64,
    /// Amplitude of the boundary deformation.
    #[arg(long, default_value_t = 0.1)]
    deformation: f64,
}

#[derive(Args)]
struct CommonRun {
    /// Dataset directory (as produced by gen-data).
    #[arg(long)]
    data: PathBuf,
    /// Run directory for artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Config file of key=value lines ('#' comments).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable): --set key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct DistillArgs {
    #[command(flatten)]
    common: CommonRun,
    /// Comma-separated teacher checkpoint paths (shorthand for
    /// --set teachers=...).
    #[arg(long)]
    teachers: Option<String>,
    /// Transform set: all12, identity, or comma-separated names
    /// (shorthand for --set transforms=...).
    #[arg(long)]
    transforms: Option<String>,
}

#[derive(Args)]
struct SelftrainArgs {
    #[command(flatten)]
    common: CommonRun,
    /// Labeled fraction ξ, or a comma list for a sweep (shorthand for
    /// --set xi=...).
    #[arg(long)]
    xi: Option<String>,
    /// Label-flip rate μ of the manual labels (shorthand for --set mu=...).
    #[arg(long)]
    mu: Option<f64>,
}

#[derive(Args)]
struct SelfcheckArgs {
    /// Corrupt one adjoint before the comparison — a negative control:
    /// the run must then fail with exit code 1.
    #[arg(long)]
    inject_fault: bool,
}

/// Parse the process arguments, run the selected command, and return the
/// process exit code (0 success, 1 runtime failure, 2 usage error).
pub fn run() -> i32 {
    let args = CliArgs::parse();
    match dispatch(args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(args: CliArgs) -> Result<i32> {
    configure_threads()?;
    let report = match args.command {
        Command::GenData(a) => cmd_gen_data(&a)?,
        Command::Train(a) => cmd_train(&a)?,
        Command::Distill(a) => cmd_distill(&a)?,
        Command::Selftrain(a) => cmd_selftrain(&a)?,
        Command::Ablate(a) => cmd_ablate(&a)?,
        Command::Eval(a) => cmd_eval(&a)?,
        Command::Selfcheck(a) => {
            return Ok(if cmd_selfcheck(a.inject_fault)? { 0 } else { 1 });
        }
    };
    println!("{}", report.display());
    Ok(0)
}

/// Apply the `DANLAB_THREADS` cap to the global worker pool. Without the
/// variable the pool defaults to the hardware thread count.
fn configure_threads() -> Result<()> {
    match std::env::var("DANLAB_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(()),
        Err(std::env::VarError::NotUnicode(_)) => {
            Err(Error::Config("DANLAB_THREADS is not valid UTF-8".into()))
        }
        Ok(raw) => {
            let threads: usize = raw.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
                Error::Config(format!("DANLAB_THREADS must be a positive integer, got `{raw}`"))
            })?;
            // A second initialization (e.g. in tests) keeps the first pool.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------
// Shared plumbing: dataset directories, config-to-domain conversions.
// ---------------------------------------------------------------------

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn parse_shape(raw: &str) -> Result<Vec<usize>> {
    let dims: std::result::Result<Vec<usize>, _> =
        raw.split('x').map(|part| part.trim().parse::<usize>()).collect();
    match dims {
        Ok(dims) if !dims.is_empty() => Ok(dims),
        _ => Err(Error::Config(format!("expected a shape like 32x32, got `{raw}`"))),
    }
}

/// Write samples as `vol{i}.img` / `vol{i}.lbl` pairs plus `index.csv`.
fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<PathBuf> {
    create_dir(dir)?;
    let mut index = String::from("index,intensity,labels\n");
    for (i, sample) in samples.iter().enumerate() {
        let img = format!("vol{i}.img");
        let lbl = format!("vol{i}.lbl");
        write_volume(&dir.join(&img), &Volume::Intensity(sample.intensity.clone()))?;
        write_volume(&dir.join(&lbl), &Volume::Labels(sample.labels.clone()))?;
        let _ = writeln!(index, "{i},{img},{lbl}");
    }
    let path = dir.join("index.csv");
    write_text(&path, &index)?;
    Ok(path)
}

/// Load a dataset directory via its `index.csv`, normalizing every label
/// volume to the configured class count.
fn load_dataset(dir: &Path, classes: usize) -> Result<Vec<LabeledVolume>> {
    let index = dir.join("index.csv");
    let text = std::fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("index,intensity,labels") {
        return Err(Error::Config(format!(
            "{}: expected header `index,intensity,labels`",
            index.display()
        )));
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [idx, img, lbl] = fields.as_slice() else {
            return Err(Error::Config(format!("{}: malformed row `{line}`", index.display())));
        };
        let idx: usize = idx.parse().map_err(|_| {
            Error::Config(format!("{}: bad index in row `{line}`", index.display()))
        })?;
        rows.push((idx, img.to_string(), lbl.to_string()));
    }
    rows.sort_by_key(|r| r.0);
    let mut out = Vec::with_capacity(rows.len());
    for (_, img, lbl) in rows {
        let x = read_intensity(&dir.join(&img))?;
        let y = read_labels(&dir.join(&lbl))?.with_classes(classes)?;
        out.push((x, y));
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(format!("dataset {} is empty", dir.display())));
    }
    Ok(out)
}

/// Hold out the last `val_count` volumes for validation.
fn split_train_val(
    mut data: Vec<LabeledVolume>,
    val_count: usize,
) -> Result<(Vec<LabeledVolume>, Vec<LabeledVolume>)> {
    if val_count >= data.len() {
        return Err(Error::InvalidArgument(format!(
            "val_count {val_count} leaves no training volumes (dataset has {})",
            data.len()
        )));
    }
    let val = data.split_off(data.len() - val_count);
    Ok((data, val))
}

fn arch_from(cfg: &RunConfig, input_shape: &[usize]) -> Result<ArchitectureSpec> {
    let mut arch = ArchitectureSpec::preset(cfg.get("arch")?, cfg.usize("classes")?)?;
    if arch.input_spatial != input_shape {
        arch.input_spatial = input_shape.to_vec();
        arch.validate_segmentation()?;
    }
    Ok(arch)
}

fn num_sites_of(arch: &ArchitectureSpec) -> usize {
    arch.layers.iter().filter(|l| matches!(l, LayerSpec::Site { .. })).count() + 1
}

fn dan_options_from(cfg: &RunConfig) -> Result<DanOptions> {
    let la_window = cfg.usize("la_window")?;
    Ok(DanOptions {
        noise: NoiseDiffusionParams::new(cfg.f64("gate_mu")?, cfg.f64("gate_tau")?)?,
        threshold: cfg.f64("gate_threshold")?,
        la_smoothing: if la_window == 0 {
            None
        } else {
            Some((la_window, cfg.f64("la_sigma")?))
        },
    })
}

fn noise_spec_from(cfg: &RunConfig) -> Result<NoiseSpec> {
    let mu = cfg.f64("mu")?;
    let seed = cfg.u64("noise_seed")?;
    let mode = match cfg.get("noise_mode")? {
        "iid" => NoiseMode::Iid,
        "blob" => NoiseMode::Blob { radius: (cfg.usize("blob_lo")?, cfg.usize("blob_hi")?) },
        other => {
            return Err(Error::Config(format!("noise_mode must be iid or blob, got `{other}`")))
        }
    };
    let spec = NoiseSpec { mu, mode, seed };
    spec.validate()?;
    Ok(spec)
}

/// Corrupt training labels in place (volume `i` uses `seed + i`) and
/// return the realized flip fraction.
fn corrupt_labels(train: &mut [LabeledVolume], spec: &NoiseSpec) -> Result<f64> {
    let mut flipped = 0usize;
    let mut total = 0usize;
    for (i, (_, labels)) in train.iter_mut().enumerate() {
        let per = NoiseSpec { seed: spec.seed.wrapping_add(i as u64), ..spec.clone() };
        let (noisy, mask) = inject_noise(labels, &per)?;
        flipped += mask.count();
        total += labels.numel();
        *labels = noisy;
    }
    Ok(flipped as f64 / total.max(1) as f64)
}

fn train_config_from(cfg: &RunConfig, iters_key: &str) -> Result<TrainConfig> {
    let config = TrainConfig {
        max_iters: cfg.usize(iters_key)?,
        batch_size: cfg.usize("batch")?,
        learning_rate: cfg.f64("lr")?,
        momentum: cfg.f64("momentum")?,
        bn_momentum: cfg.f64("bn_momentum")?,
        validate_every: cfg.usize("validate_every")?,
        seed: cfg.u64("shuffle_seed")?,
    };
    config.validate()?;
    Ok(config)
}

/// `all`, `none`, or a comma list of 1-based site numbers.
fn parse_sites(raw: &str, num_sites: usize) -> Result<Vec<usize>> {
    match raw {
        "all" => Ok((1..=num_sites).collect()),
        "none" => Ok(Vec::new()),
        _ => raw
            .split(',')
            .map(|part| {
                part.trim().parse::<usize>().map_err(|_| {
                    Error::Config(format!("sites must be `all`, `none`, or numbers, got `{raw}`"))
                })
            })
            .collect(),
    }
}

/// Comma list of variants, each `none` or sites joined by `+` (e.g.
/// `none,3,2+3,1+2+3`).
fn parse_variants(raw: &str) -> Result<Vec<Vec<usize>>> {
    raw.split(',')
        .map(|token| {
            let token = token.trim();
            if token == "none" {
                return Ok(Vec::new());
            }
            token
                .split('+')
                .map(|part| {
                    part.trim().parse::<usize>().map_err(|_| {
                        Error::Config(format!(
                            "variants must look like `none,3,2+3`, got `{raw}`"
                        ))
                    })
                })
                .collect()
        })
        .collect()
}

fn transforms_from(cfg: &RunConfig) -> Result<Vec<GeometricTransform>> {
    let raw = cfg.get("transforms")?;
    match raw {
        "all12" => Ok(GeometricTransform::all12()),
        "identity" => Ok(vec![GeometricTransform::identity()]),
        _ => {
            let catalog = GeometricTransform::all12();
            raw.split(',')
                .map(|token| {
                    let token = match token.trim() {
                        "identity" => "r0",
                        other => other,
                    };
                    catalog.iter().find(|t| t.name() == token).cloned().ok_or_else(|| {
                        Error::Config(format!(
                            "unknown transform `{token}`; available: all12, identity, {}",
                            catalog.iter().map(|t| t.name()).collect::<Vec<_>>().join(", ")
                        ))
                    })
                })
                .collect()
        }
    }
}

fn aggregation_from(cfg: &RunConfig) -> Result<Aggregation> {
    match cfg.get("aggregation")? {
        "hard_vote" => Ok(Aggregation::HardVote),
        "mean_prob" => Ok(Aggregation::MeanProbability),
        other => Err(Error::Config(format!(
            "aggregation must be hard_vote or mean_prob, got `{other}`"
        ))),
    }
}

// ---------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------

fn cmd_gen_data(args: &GenDataArgs) -> Result<PathBuf> {
    let spec = SyntheticSpec {
        count: args.count,
        shape: parse_shape(&args.shape)?,
        seed: args.seed,
        noise_sigma: args.noise_sigma,
        deformation: args.deformation,
    };
    spec.validate()?;
    let samples = generate(&spec)?;
    println!("generated {} volumes of shape {}", samples.len(), args.shape);
    write_dataset(&args.out, &samples)
}

// ---------------------------------------------------------------------
// train
// ---------------------------------------------------------------------

const GATE_KEYS: &[SchemaEntry] = &[
    entry("gate_mu", "0.1"),
    entry("gate_tau", "0.1"),
    entry("gate_threshold", "0.5"),
    entry("la_window", "3"),
    entry("la_sigma", "0.5"),
];

const NOISE_KEYS: &[SchemaEntry] = &[
    entry("mu", "0.0"),
    entry("noise_mode", "iid"),
    entry("blob_lo", "2"),
    entry("blob_hi", "4"),
    entry("noise_seed", "11"),
];

const OPT_KEYS: &[SchemaEntry] = &[
    entry("batch", "4"),
    entry("lr", "0.05"),
    entry("momentum", "0.9"),
    entry("bn_momentum", "0.9"),
    entry("validate_every", "0"),
    entry("shuffle_seed", "0"),
];

fn schema(parts: &[&[SchemaEntry]]) -> Vec<SchemaEntry> {
    parts.concat()
}

fn train_schema() -> Vec<SchemaEntry> {
    schema(&[
        &[
            entry("arch", "small2d"),
            entry("classes", "3"),
            entry("val_count", "2"),
            entry("model_seed", "40"),
            entry("sites", "all"),
            entry("iters", "300"),
        ],
        NOISE_KEYS,
        OPT_KEYS,
        GATE_KEYS,
    ])
}

fn cmd_train(args: &CommonRun) -> Result<PathBuf> {
    let cfg = RunConfig::resolve(&train_schema(), args.config.as_deref(), &args.set)?;
    create_dir(&args.out)?;
    let data = load_dataset(&args.data, cfg.usize("classes")?)?;
    let (mut train, val) = split_train_val(data, cfg.usize("val_count")?)?;
    let arch = arch_from(&cfg, train[0].0.shape())?;

    let mut report = ExperimentReport::default();
    report.push("train", "data", "count", train.len() as f64);
    report.push("train", "data", "val_count", val.len() as f64);
    let noise = noise_spec_from(&cfg)?;
    if noise.mu > 0.0 {
        let flip = corrupt_labels(&mut train, &noise)?;
        report.push("train", "data", "flip_fraction", flip);
    }

    let sites = parse_sites(cfg.get("sites")?, num_sites_of(&arch))?;
    let mut model = TwoStreamDan::<f32>::new(arch, cfg.u64("model_seed")?, &dan_options_from(&cfg)?)?
        .ablate(&sites)?;
    let train_config = train_config_from(&cfg, "iters")?;
    println!(
        "training {} on {} volumes for {} iterations",
        model.arch().name,
        train.len(),
        train_config.max_iters
    );
    let log = model.train(&train, &val, &train_config)?;

    write_text(&args.out.join("train_log.csv"), &log.to_csv())?;
    model.save_checkpoint(&args.out.join("model.ckpt"))?;
    report.push("train", "model", "iterations", train_config.max_iters as f64);
    report.push("train", "model", "final_loss", log.losses().last().copied().unwrap_or(f64::NAN));
    if let Some(v) = log.final_val_dice() {
        report.push("train", "model", "val_dice", v);
    }
    let report_path = args.out.join("report.csv");
    write_text(&report_path, &report.to_csv())?;
    write_text(&args.out.join("config.txt"), &cfg.echo())?;
    Ok(report_path)
}

// ---------------------------------------------------------------------
// distill
// ---------------------------------------------------------------------

fn distill_schema() -> Vec<SchemaEntry> {
    schema(&[
        &[
            entry("arch", "small2d"),
            entry("classes", "3"),
            entry("teacher_kind", "dan"),
            entry("teachers", ""),
            entry("sites", "all"),
            entry("transforms", "all12"),
            entry("aggregation", "hard_vote"),
        ],
        GATE_KEYS,
    ])
}

fn cmd_distill(args: &DistillArgs) -> Result<PathBuf> {
    let mut overrides = args.common.set.clone();
    if let Some(t) = &args.teachers {
        overrides.push(format!("teachers={t}"));
    }
    if let Some(t) = &args.transforms {
        overrides.push(format!("transforms={t}"));
    }
    let cfg = RunConfig::resolve(&distill_schema(), args.common.config.as_deref(), &overrides)?;
    create_dir(&args.common.out)?;
    let data = load_dataset(&args.common.data, cfg.usize("classes")?)?;
    let arch = arch_from(&cfg, data[0].0.shape())?;

    let paths: Vec<&str> =
        cfg.get("teachers")?.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
    if paths.is_empty() {
        return Err(Error::InvalidArgument(
            "distill needs at least one teacher checkpoint (teachers=a.ckpt,b.ckpt)".into(),
        ));
    }
    let sites = parse_sites(cfg.get("sites")?, num_sites_of(&arch))?;
    let options = dan_options_from(&cfg)?;
    let mut dan_teachers: Vec<TwoStreamDan<f32>> = Vec::new();
    let mut stream_teachers: Vec<SingleStream<f32>> = Vec::new();
    for path in &paths {
        match cfg.get("teacher_kind")? {
            "dan" => {
                let mut m = TwoStreamDan::<f32>::new(arch.clone(), 0, &options)?.ablate(&sites)?;
                m.load_checkpoint(Path::new(path))?;
                dan_teachers.push(m);
            }
            "stream" => {
                let mut m = SingleStream::<f32>::new(arch.clone(), 0)?;
                m.load_checkpoint(Path::new(path))?;
                stream_teachers.push(m);
            }
            other => {
                return Err(Error::Config(format!(
                    "teacher_kind must be dan or stream, got `{other}`"
                )))
            }
        }
    }
    let members: Vec<(&dyn Predictor, String)> = dan_teachers
        .iter()
        .map(|m| m as &dyn Predictor)
        .chain(stream_teachers.iter().map(|m| m as &dyn Predictor))
        .enumerate()
        .map(|(t, m)| (m, format!("teacher{t}")))
        .collect();
    let teacher_set = TeacherSet::new(members)?;
    let transforms = transforms_from(&cfg)?;
    let aggregation = aggregation_from(&cfg)?;
    println!(
        "distilling {} volumes through {} teachers × {} transforms",
        data.len(),
        paths.len(),
        transforms.len()
    );

    let pseudo_dir = args.common.out.join("pseudo");
    create_dir(&pseudo_dir)?;
    let mut report = ExperimentReport::default();
    let mut manifest = String::from("index,file,mean_dice,flip_rate\n");
    for (i, (x, truth)) in data.iter().enumerate() {
        let labels = hierarchical_distill(&teacher_set, x, &transforms, aggregation)?;
        let file = format!("vol{i}.lbl");
        write_volume(&pseudo_dir.join(&file), &Volume::Labels(labels.clone()))?;
        let quality = pseudo_label_quality(&labels, truth)?;
        let mean_dice = quality.dice.iter().sum::<f64>() / quality.dice.len().max(1) as f64;
        let _ = writeln!(manifest, "{i},{file},{mean_dice},{}", quality.flip_rate);
        report.push("pseudo", format!("vol{i}"), "mean_dice", mean_dice);
        report.push("pseudo", format!("vol{i}"), "flip_rate", quality.flip_rate);
    }
    write_text(&pseudo_dir.join("manifest.csv"), &manifest)?;
    let overall = report.mean("pseudo", "mean_dice").unwrap_or(f64::NAN);
    report.push("pseudo", "all", "count", data.len() as f64);
    report.push("pseudo", "all", "mean_dice", overall);

    let report_path = args.common.out.join("report.csv");
    write_text(&report_path, &report.to_csv())?;
    write_text(&args.common.out.join("config.txt"), &cfg.echo())?;
    Ok(report_path)
}

// ---------------------------------------------------------------------
// selftrain
// ---------------------------------------------------------------------

fn selftrain_schema() -> Vec<SchemaEntry> {
    schema(&[
        &[
            entry("arch", "small2d"),
            entry("classes", "3"),
            entry("val_count", "2"),
            entry("xi", "0.5"),
            entry("split_seed", "5"),
            entry("model_seed", "40"),
            entry("teachers", "2"),
            entry("single_stream_teachers", "false"),
            entry("teacher_iters", "500"),
            entry("final_iters", "1000"),
            entry("transforms", "all12"),
            entry("aggregation", "hard_vote"),
        ],
        &[
            entry("mu", "0.2"),
            entry("noise_mode", "iid"),
            entry("blob_lo", "2"),
            entry("blob_hi", "4"),
            entry("noise_seed", "11"),
        ],
        OPT_KEYS,
        GATE_KEYS,
    ])
}

fn cmd_selftrain(args: &SelftrainArgs) -> Result<PathBuf> {
    let mut overrides = args.common.set.clone();
    if let Some(xi) = &args.xi {
        overrides.push(format!("xi={xi}"));
    }
    if let Some(mu) = args.mu {
        overrides.push(format!("mu={mu}"));
    }
    let cfg = RunConfig::resolve(&selftrain_schema(), args.common.config.as_deref(), &overrides)?;
    create_dir(&args.common.out)?;
    let data = load_dataset(&args.common.data, cfg.usize("classes")?)?;
    let (train, val) = split_train_val(data, cfg.usize("val_count")?)?;
    let arch = arch_from(&cfg, train[0].0.shape())?;

    let mut pipeline = PipelineConfig::new(arch);
    pipeline.noise = noise_spec_from(&cfg)?;
    pipeline.split_seed = cfg.u64("split_seed")?;
    pipeline.model_seed = cfg.u64("model_seed")?;
    pipeline.num_teachers = cfg.usize("teachers")?;
    pipeline.single_stream_teachers = cfg.bool("single_stream_teachers")?;
    pipeline.dan = dan_options_from(&cfg)?;
    pipeline.teacher_train = train_config_from(&cfg, "teacher_iters")?;
    pipeline.final_train = train_config_from(&cfg, "final_iters")?;
    pipeline.transforms = transforms_from(&cfg)?;
    pipeline.aggregation = aggregation_from(&cfg)?;

    let xis: Vec<f64> = cfg.list("xi")?;
    let report_path = match xis.as_slice() {
        [] => return Err(Error::Config("xi must name at least one value".into())),
        [xi] => {
            pipeline.xi = *xi;
            println!(
                "pipeline ξ={xi} on {} volumes ({} teachers, {}+{} iterations)",
                train.len(),
                pipeline.num_teachers,
                pipeline.teacher_train.max_iters,
                pipeline.final_train.max_iters
            );
            run_pipeline(&train, &val, &pipeline, &args.common.out)?;
            args.common.out.join("report.csv")
        }
        _ => {
            println!("sweeping ξ over {xis:?} on {} volumes", train.len());
            let rows = xi_sweep(&train, &val, &pipeline, &xis, &args.common.out)?;
            let path = args.common.out.join("sweep.csv");
            write_text(&path, &xi_sweep_csv(&rows))?;
            path
        }
    };
    write_text(&args.common.out.join("config.txt"), &cfg.echo())?;
    Ok(report_path)
}

// ---------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------

fn ablate_schema() -> Vec<SchemaEntry> {
    schema(&[
        &[
            entry("arch", "small2d"),
            entry("classes", "3"),
            entry("val_count", "2"),
            entry("model_seed", "40"),
            entry("variants", ""),
            entry("iters", "300"),
        ],
        NOISE_KEYS,
        OPT_KEYS,
        GATE_KEYS,
    ])
}

fn cmd_ablate(args: &CommonRun) -> Result<PathBuf> {
    let cfg = RunConfig::resolve(&ablate_schema(), args.config.as_deref(), &args.set)?;
    create_dir(&args.out)?;
    let data = load_dataset(&args.data, cfg.usize("classes")?)?;
    let (mut train, val) = split_train_val(data, cfg.usize("val_count")?)?;
    let arch = arch_from(&cfg, train[0].0.shape())?;
    let noise = noise_spec_from(&cfg)?;
    if noise.mu > 0.0 {
        corrupt_labels(&mut train, &noise)?;
    }
    let subsets = match cfg.get("variants")? {
        "" => default_chain(num_sites_of(&arch)),
        raw => parse_variants(raw)?,
    };
    let sweep = SweepConfig {
        arch,
        options: dan_options_from(&cfg)?,
        train: train_config_from(&cfg, "iters")?,
        model_seed: cfg.u64("model_seed")?,
    };
    println!(
        "ablating {} variants × {} iterations on {} volumes",
        subsets.len(),
        sweep.train.max_iters,
        train.len()
    );
    let table = ablation_sweep(&train, &val, &sweep, &subsets)?;
    let report_path = args.out.join("report.csv");
    write_text(&report_path, &table.to_csv())?;
    write_text(&args.out.join("config.txt"), &cfg.echo())?;
    Ok(report_path)
}

// ---------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted label volumes (*.lbl).
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth label volumes, paired by filename.
    #[arg(long)]
    truth: PathBuf,
    /// Output directory for report.csv.
    #[arg(long)]
    out: PathBuf,
}

/// A boundary metric that is undefined (class empty on one side) becomes
/// an empty CSV cell instead of aborting the evaluation.
fn defined_or_empty(value: Result<f64>) -> Result<Option<f64>> {
    match value {
        Ok(v) => Ok(Some(v)),
        Err(Error::EmptyBoundary { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

fn cmd_eval(args: &EvalArgs) -> Result<PathBuf> {
    create_dir(&args.out)?;
    let mut names: Vec<String> = std::fs::read_dir(&args.truth)
        .map_err(|e| Error::io(&args.truth, e))?
        .filter_map(|entry| entry.ok())
        .map(|entry| entry.file_name().to_string_lossy().into_owned())
        .filter(|name| name.ends_with(".lbl"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no *.lbl volumes in {}",
            args.truth.display()
        )));
    }
    println!("scoring {} volumes", names.len());

    let mut csv = String::from("sample,class,dice,adb,hdd\n");
    let mut by_class: BTreeMap<usize, (Vec<f64>, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let fmt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for name in &names {
        let truth = read_labels(&args.truth.join(name))?;
        let pred = read_labels(&args.pred.join(name))?;
        let classes = truth.classes().max(pred.classes());
        let truth = truth.with_classes(classes)?;
        let pred = pred.with_classes(classes)?;
        let stem = name.trim_end_matches(".lbl");
        for class in 1..classes {
            let d = dice(&pred, &truth, class)?;
            let a = defined_or_empty(avg_boundary_distance(&pred, &truth, class))?;
            let h = defined_or_empty(hausdorff(&pred, &truth, class))?;
            let _ = writeln!(csv, "{stem},{class},{d},{},{}", fmt(a), fmt(h));
            let slot = by_class.entry(class).or_default();
            slot.0.push(d);
            slot.1.extend(a);
            slot.2.extend(h);
        }
    }
    let mean = |values: &[f64]| {
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    };
    for (class, (d, a, h)) in &by_class {
        let _ =
            writeln!(csv, "mean,{class},{},{},{}", fmt(mean(d)), fmt(mean(a)), fmt(mean(h)));
    }

    let report_path = args.out.join("report.csv");
    write_text(&report_path, &csv)?;
    write_text(
        &args.out.join("config.txt"),
        &format!("pred={}\ntruth={}\n", args.pred.display(), args.truth.display()),
    )?;
    Ok(report_path)
}

// ---------------------------------------------------------------------
// selfcheck
// ---------------------------------------------------------------------

struct Check {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn run_check(name: &'static str, body: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match body() {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check { name, passed: false, detail: format!("errored: {e}") },
    }
}

fn check_noise_table() -> Result<(bool, String)> {
    let params = NoiseDiffusionParams::new(0.1, 0.1)?;
    let p4 = crate::attention::noise_probability(&params, 4);
    let p52 = crate::attention::noise_probability(&params, 52);
    let p64 = crate::attention::noise_probability(&params, 64);
    let passed =
        (p4 - 0.1551).abs() <= 1e-4 && (p52 - 1.0).abs() <= 1e-12 && (p64 - 1.0).abs() <= 1e-12;
    Ok((
        passed,
        format!("prob(mu=0.1, tau=0.1, rho=4) = {p4:.4}; rho=52 → {p52}; rho=64 → {p64}"),
    ))
}

/// One finite-difference comparison: a named graph builder plus the input
/// it differentiates with respect to.
fn gradient_cases() -> Vec<(&'static str, Box<dyn Fn() -> Result<f64>>)> {
    let labels = |n: usize, classes: usize, seed: u64| -> Vec<usize> {
        use rand::Rng;
        let mut rng = seeded_rng(seed);
        (0..n).map(|_| rng.gen_range(0..classes)).collect()
    };
    vec![
        (
            "gradient: elementwise + softmax cross-entropy",
            Box::new(move || {
                let x = Tensor::uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut seeded_rng(31));
                let y = labels(32, 3, 32);
                grad_check(
                    |tape, x| {
                        let a = tape.scale(x, 1.5)?;
                        let b = tape.mul(a, a)?;
                        let c = tape.add(b, a)?;
                        tape.softmax_ce(c, &y)
                    },
                    &x,
                    1e-5,
                )
            }),
        ),
        (
            "gradient: relu + pooling + upsampling",
            Box::new(move || {
                let x = Tensor::uniform(&[1, 2, 6, 6], -1.0, 1.0, &mut seeded_rng(33));
                let y = labels(9, 2, 34);
                grad_check(
                    |tape, x| {
                        let r = tape.relu(x)?;
                        let m = tape.maxpool(r, 2, 2)?;
                        let u = tape.upsample_nearest(m, 2)?;
                        let a = tape.avgpool(u, 2, 2)?;
                        tape.softmax_ce(a, &y)
                    },
                    &x,
                    1e-5,
                )
            }),
        ),
        (
            "gradient: convolution + batch norm",
            Box::new(move || {
                let spec = ConvSpec::uniform(2, 3, 3, 1, 1, 2)?;
                let conv = ConvParams::<f64>::init(spec, &mut seeded_rng(35));
                let bn = BnParams::<f64>::init(3, BN_EPS);
                let x = Tensor::uniform(&[2, 2, 5, 5], -1.0, 1.0, &mut seeded_rng(36));
                let y = labels(50, 3, 37);
                grad_check(
                    |tape, x| {
                        let (c, _, _) = conv.forward(tape, x)?;
                        let (z, _, _, _) = bn.forward_train(tape, c)?;
                        tape.softmax_ce(z, &y)
                    },
                    &x,
                    1e-5,
                )
            }),
        ),
        (
            "gradient: spatial attention gate",
            Box::new(move || {
                use crate::attention::SpatialAttention;
                let sa = SpatialAttention::<f64>::new(3, 2, &mut seeded_rng(38))?;
                let x = Tensor::uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut seeded_rng(39));
                let y = labels(32, 3, 40);
                grad_check(
                    |tape, x| {
                        let (gate, _) = sa.forward(tape, x)?;
                        let gated = tape.mul(x, gate)?;
                        tape.softmax_ce(gated, &y)
                    },
                    &x,
                    1e-5,
                )
            }),
        ),
        (
            "gradient: channel attention gate",
            Box::new(move || {
                use crate::attention::ChannelAttention;
                let ca = ChannelAttention::<f64>::new(4, &mut seeded_rng(41))?;
                let x = Tensor::uniform(&[2, 4, 3, 3], -1.0, 1.0, &mut seeded_rng(42));
                let y = labels(18, 4, 43);
                grad_check(
                    |tape, x| {
                        let (gate, _) = ca.forward(tape, x)?;
                        let gated = tape.mul(x, gate)?;
                        tape.softmax_ce(gated, &y)
                    },
                    &x,
                    1e-5,
                )
            }),
        ),
    ]
}

fn check_network_gradients(threshold: f64) -> Result<(bool, String)> {
    let options = DanOptions { threshold, ..DanOptions::default() };
    let audit = dan_gradient_audit(&miniature_arch(), &options, &[1], 23, 1e-5)?;
    Ok((
        audit.max_rel_error < 1e-4 && audit.checked > 200,
        format!("{} parameters, max rel err {:.2e}", audit.checked, audit.max_rel_error),
    ))
}

fn check_transform_round_trip() -> Result<(bool, String)> {
    let x2 = Tensor::<f32>::uniform(&[7, 7], 0.0, 1.0, &mut seeded_rng(51));
    let x3 = Tensor::<f32>::uniform(&[3, 5, 5], 0.0, 1.0, &mut seeded_rng(52));
    let l2 = random_mask(&[7, 7], 3, 53);
    let l3 = random_mask(&[3, 5, 5], 3, 54);
    let mut failures = Vec::new();
    for t in GeometricTransform::all12() {
        let inv = t.inverse();
        for (tag, x) in [("2d", &x2), ("3d", &x3)] {
            if &inv.apply_tensor(&t.apply_tensor(x)?)? != x {
                failures.push(format!("{} on {tag} intensities", t.name()));
            }
        }
        for (tag, l) in [("2d", &l2), ("3d", &l3)] {
            if &inv.apply_labels(&t.apply_labels(l)?)? != l {
                failures.push(format!("{} on {tag} labels", t.name()));
            }
        }
    }
    if failures.is_empty() {
        Ok((true, "12 transforms × (2d, 3d) × (intensity, labels) all bit-exact".into()))
    } else {
        Ok((false, format!("round trip broke: {}", failures.join(", "))))
    }
}

/// Random label volume with at least one voxel of every class.
fn random_mask(shape: &[usize], classes: usize, seed: u64) -> LabelVolume {
    use rand::Rng;
    let mut rng = seeded_rng(seed);
    let numel: usize = shape.iter().product();
    let mut data: Vec<u8> = (0..numel).map(|_| rng.gen_range(0..classes as u8)).collect();
    for c in 0..classes as u8 {
        let at = rng.gen_range(0..numel);
        data[at] = c;
    }
    LabelVolume::from_parts(shape.to_vec(), classes, data).expect("valid mask")
}

fn check_metric_oracles() -> Result<(bool, String)> {
    use rand::Rng;
    let mut rng = seeded_rng(61);
    let mut compared = 0usize;
    for trial in 0..25 {
        let shape = vec![rng.gen_range(3..=20), rng.gen_range(3..=20)];
        let pred = random_mask(&shape, 2, 62 + trial);
        let truth = random_mask(&shape, 2, 900 + trial);
        if dice(&pred, &truth, 1)? != dice(&truth, &pred, 1)? {
            return Ok((false, format!("dice asymmetric on trial {trial}")));
        }
        if dice(&pred, &pred, 1)? != 1.0 {
            return Ok((false, format!("dice(x,x) ≠ 1 on trial {trial}")));
        }
        let fast = avg_boundary_distance(&pred, &truth, 1)?;
        let slow = adb_brute_force(&pred, &truth, 1)?;
        if fast != slow {
            return Ok((false, format!("adb {fast} vs oracle {slow} on trial {trial}")));
        }
        let fast = hausdorff(&pred, &truth, 1)?;
        let slow = hausdorff_brute_force(&pred, &truth, 1)?;
        if fast != slow {
            return Ok((false, format!("hausdorff {fast} vs oracle {slow} on trial {trial}")));
        }
        compared += 1;
    }
    Ok((true, format!("{compared} random mask pairs match the all-pairs oracles exactly")))
}

/// Compare one backward pass against central differences computed right
/// here, optionally corrupting the first adjoint entry first. With the
/// corruption this check MUST fail — it proves a wrong gradient cannot
/// slip through the comparison.
fn check_adjoint_fixture(inject_fault: bool) -> Result<(bool, String)> {
    use rand::Rng;
    let mut rng = seeded_rng(71);
    let x = Tensor::<f64>::uniform(&[1, 3, 2, 2], -1.0, 1.0, &mut rng);
    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
    let loss_of = |t: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v: Val = tape.constant(t);
        let loss = tape.softmax_ce(v, &labels)?;
        Ok(tape.value(loss)[0])
    };

    let mut analytic = {
        let mut tape = Tape::new();
        let v = tape.push_leaf(x.shape().to_vec(), x.data().to_vec(), true);
        let loss = tape.softmax_ce(v, &labels)?;
        tape.backward(loss)?;
        tape.grad_or_zeros(v)
    };
    if inject_fault {
        analytic[0] += 0.5;
    }

    let h = 1e-6;
    let mut max_rel: f64 = 0.0;
    for j in 0..x.numel() {
        let mut up = x.clone();
        up.data_mut()[j] += h;
        let mut down = x.clone();
        down.data_mut()[j] -= h;
        let numeric = (loss_of(&up)? - loss_of(&down)?) / (2.0 * h);
        let rel =
            (analytic[j] - numeric).abs() / analytic[j].abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok((
        max_rel < 1e-4,
        format!(
            "max rel err {max_rel:.2e}{}",
            if inject_fault { " (adjoint deliberately corrupted)" } else { "" }
        ),
    ))
}

fn cmd_selfcheck(inject_fault: bool) -> Result<bool> {
    let mut checks = vec![run_check("noise-probability table", check_noise_table)];
    for (name, case) in gradient_cases() {
        checks.push(run_check(name, || case().map(|rel| (rel < 1e-4, format!("max rel err {rel:.2e}")))));
    }
    checks.push(run_check("gradient: two-stream network (spatial gates)", || {
        check_network_gradients(crate::attention::PLACEMENT_THRESHOLD)
    }));
    checks.push(run_check("gradient: two-stream network (channel gates)", || {
        check_network_gradients(1e-9)
    }));
    checks.push(run_check("transform round trips", check_transform_round_trip));
    checks.push(run_check("metric oracles", check_metric_oracles));
    checks.push(run_check("adjoint comparison fixture", || check_adjoint_fixture(inject_fault)));

    let mut passed = 0usize;
    for check in &checks {
        println!(
            "[{}] {} — {}",
            if check.passed { "PASS" } else { "FAIL" },
            check.name,
            check.detail
        );
        passed += check.passed as usize;
    }
    println!("{passed} of {} checks passed", checks.len());
    Ok(passed == checks.len())
}
