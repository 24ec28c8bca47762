//! `mvseg`: command-line front end for mvseg-core.
//!
//! Exit codes: 0 ok, 1 check failed, 2 I/O, 3 association, 4 configuration.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use log::info;
use serde::Deserialize;
use serde_json::json;

use mvseg_core::fusion::{fuse, uniform_subset, FusionMethod, ViewPrediction};
use mvseg_core::geometry::{compute_warp_grid, mask_occlusions, CameraIntrinsics, OCCLUSION_TOLERANCE};
use mvseg_core::io::{load_depth, load_labels, load_trajectory, save_labels, save_mask, SequenceManifest};
use mvseg_core::learning::gradcheck::run_suite;
use mvseg_core::learning::{evaluate, save_checkpoint, train, ConsistencyMode, PreparedSequence, TrainConfig};
use mvseg_core::metrics::{argmax_labels, ConfusionMatrix};
use mvseg_core::synth::{
    default_intrinsics, synthetic_set, write_sequence, NoiseModel, PathKind, PathSpec, SceneSpec, SyntheticSetConfig,
};
use mvseg_core::warp::bilinear_sample;
use mvseg_core::{Error, Tensor};

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_ASSOCIATION: u8 = 3;
const EXIT_CONFIG: u8 = 4;

/// Gradient checks fail above this relative error.
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "mvseg", version, about = "Multi-view RGB-D semantic segmentation tools")]
struct Cli {
    /// Worker threads (1 gives bit-reproducible serial execution; 0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic sequence with simulated predictions.
    SynthGen(SynthGenArgs),
    /// Warp one frame's scores into the keyframe.
    Warp(WarpArgs),
    /// Fuse neighbor scores into the keyframe.
    Fuse(FuseArgs),
    /// Score a prediction against ground truth.
    Eval(EvalArgs),
    /// Train the toy network on synthetic sequences.
    TrainToy(TrainToyArgs),
    /// Compare analytic gradients with finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
struct SynthGenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scene file; a random scene is drawn from the seed if omitted.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Classes of a random scene.
    #[arg(long, default_value_t = 6)]
    classes: usize,
    /// Camera path: line, arc or orbit.
    #[arg(long, default_value = "arc")]
    path: PathKind,
    #[arg(long, default_value_t = 30)]
    frames: usize,
    #[arg(long, default_value_t = 96)]
    width: usize,
    #[arg(long, default_value_t = 72)]
    height: usize,
    /// Gaussian score noise.
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
    /// Probability of predicting a wrong class.
    #[arg(long, default_value_t = 0.25)]
    misclassification: f64,
    /// Label noise radius around class boundaries, in pixels.
    #[arg(long, default_value_t = 0)]
    boundary_radius: usize,
}

#[derive(Debug, Args)]
struct WarpArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Id of the frame to warp.
    #[arg(long)]
    frame: usize,
    /// Scores to warp instead of the frame's own score file.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Warped scores (MVFT).
    #[arg(long)]
    out: PathBuf,
    /// Validity mask (PGM, 255 = valid). Defaults to OUT with extension .mask.pgm.
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FuseArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// bayes, bayes-prob or maxpool.
    #[arg(long, default_value = "bayes")]
    method: FusionMethod,
    /// Frames to fuse, keyframe included.
    #[arg(long, default_value_t = 50)]
    frames: usize,
    /// Fused scores (MVFT).
    #[arg(long)]
    out: PathBuf,
    /// Fused labels (PGM).
    #[arg(long)]
    labels_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("prediction").required(true).args(["pred", "pred_labels"])))]
struct EvalArgs {
    /// Predicted scores (MVFT); the label is the per-pixel argmax.
    #[arg(long, conflicts_with = "pred_labels")]
    pred: Option<PathBuf>,
    /// Predicted labels (PGM).
    #[arg(long)]
    pred_labels: Option<PathBuf>,
    /// Ground-truth labels (PGM). Defaults to the manifest keyframe's labels.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Manifest supplying ground truth and class count.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Number of classes.
    #[arg(long)]
    classes: Option<usize>,
    /// Structured report.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainToyArgs {
    /// mono, augment, bayes or maxpool.
    #[arg(long, default_value = "mono")]
    consistency: ConsistencyMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overrides the configured epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// TOML file with [train], [data] and [eval] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoint.mvck and train.log.
    #[arg(long)]
    out: PathBuf,
    /// Structured report.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Structured report.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalSetConfig {
    sequences: usize,
    /// Frames fused per keyframe.
    frames: usize,
}

impl Default for EvalSetConfig {
    fn default() -> Self {
        Self {
            sequences: 6,
            frames: 9,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ToyRunConfig {
    train: TrainConfig,
    data: SyntheticSetConfig,
    eval: EvalSetConfig,
}

impl Default for ToyRunConfig {
    fn default() -> Self {
        let data = SyntheticSetConfig::default();
        let mut train = TrainConfig::default();
        train.net.num_classes = data.num_classes;
        Self {
            train,
            data,
            eval: EvalSetConfig::default(),
        }
    }
}

enum Failure {
    Core(Error),
    CheckFailed(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CmdResult = Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format { .. } | Error::Parse { .. } => EXIT_IO,
        Error::Association(_) => EXIT_ASSOCIATION,
        Error::NonFinite(_) => EXIT_CHECK_FAILED,
        _ => EXIT_CONFIG,
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).expect("JSON values always serialize");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn parent_dir(path: &Path) -> Result<(), Error> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn cmd_synth_gen(a: &SynthGenArgs) -> CmdResult {
    let scene = match &a.scene {
        Some(p) => SceneSpec::load(p)?,
        None => SceneSpec::from_seed(a.seed, a.classes)?,
    };
    let noise = NoiseModel {
        sigma: a.sigma,
        misclassification_rate: a.misclassification,
        boundary_radius: a.boundary_radius,
        seed: a.seed,
        ..NoiseModel::default()
    };
    noise.validate()?;
    let k = default_intrinsics(a.width, a.height)?;
    let poses = PathSpec::new(a.path, a.frames).poses()?;
    create_dir(&a.out)?;
    let manifest = write_sequence(&a.out, &scene, &poses, &k, &noise)?;
    println!("{}", manifest.display());
    Ok(())
}

struct Sequence {
    manifest: SequenceManifest,
    k: CameraIntrinsics,
    trajectory: mvseg_core::io::Trajectory,
}

fn load_sequence(path: &Path) -> Result<Sequence, Error> {
    let manifest = SequenceManifest::load(path)?;
    let k = CameraIntrinsics::load(&manifest.intrinsics)?;
    let trajectory = load_trajectory(&manifest.trajectory)?;
    Ok(Sequence {
        manifest,
        k,
        trajectory,
    })
}

fn frame_scores(rec: &mvseg_core::io::FrameRecord) -> Result<Tensor, Error> {
    let path = rec
        .scores
        .as_ref()
        .ok_or_else(|| Error::Config(format!("frame {} has no score file", rec.id)))?;
    Tensor::load_mvft(path)
}

/// Warps `rec`'s scores into the keyframe with occlusion masking.
fn warp_into_keyframe(
    seq: &Sequence,
    key_depth: &mvseg_core::geometry::DepthMap,
    rec: &mvseg_core::io::FrameRecord,
    scores: &Tensor,
) -> Result<mvseg_core::warp::SampledMap, Error> {
    let key = &seq.manifest.keyframe;
    let pose = seq.trajectory.relative_pose(key.timestamp, rec.timestamp)?;
    let depth = load_depth(&rec.depth)?;
    let mut grid = compute_warp_grid(key_depth, &pose, &seq.k)?;
    mask_occlusions(&mut grid, key_depth, &depth, &pose, &seq.k, OCCLUSION_TOLERANCE)?;
    Ok(bilinear_sample(scores, &grid))
}

fn cmd_warp(a: &WarpArgs) -> CmdResult {
    let seq = load_sequence(&a.manifest)?;
    let rec = seq
        .manifest
        .frame(a.frame)
        .ok_or_else(|| Error::Config(format!("frame {} is not in {}", a.frame, a.manifest.display())))?;
    let scores = match &a.scores {
        Some(p) => Tensor::load_mvft(p)?,
        None => frame_scores(rec)?,
    };
    let key_depth = load_depth(&seq.manifest.keyframe.depth)?;
    let warped = warp_into_keyframe(&seq, &key_depth, rec, &scores)?;
    parent_dir(&a.out)?;
    warped.values.save_mvft(&a.out)?;
    let mask = a.mask.clone().unwrap_or_else(|| a.out.with_extension("mask.pgm"));
    parent_dir(&mask)?;
    save_mask(&mask, &warped.validity)?;
    let valid = warped.validity.count_valid();
    let total = warped.validity.data().len();
    println!("{:<12}{:>10}", "valid", valid);
    println!("{:<12}{:>10}", "pixels", total);
    Ok(())
}

fn cmd_fuse(a: &FuseArgs) -> CmdResult {
    if a.frames == 0 {
        return Err(Error::Config("--frames must be at least 1".into()).into());
    }
    let seq = load_sequence(&a.manifest)?;
    let key = &seq.manifest.keyframe;
    let key_depth = load_depth(&key.depth)?;
    let candidates: Vec<_> = seq.manifest.neighbors.iter().filter(|r| r.scores.is_some()).collect();
    let chosen = uniform_subset(candidates.len(), a.frames - 1);
    let mut views = vec![ViewPrediction::keyframe(frame_scores(key)?)];
    for (n, &i) in chosen.iter().enumerate() {
        let rec = candidates[i];
        let warped = warp_into_keyframe(&seq, &key_depth, rec, &frame_scores(rec)?)?;
        views.push(ViewPrediction::from_sampled(warped, n + 1));
    }
    info!("fusing {} frames with {:?}", views.len(), a.method);
    let fused = fuse(a.method, &views)?;
    parent_dir(&a.out)?;
    fused.save_mvft(&a.out)?;
    if let Some(p) = &a.labels_out {
        parent_dir(p)?;
        save_labels(p, &argmax_labels(&fused))?;
    }
    println!("{:<12}{:>10}", "frames", views.len());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    let manifest = a.manifest.as_deref().map(SequenceManifest::load).transpose()?;
    let gt_path = match (&a.gt, &manifest) {
        (Some(p), _) => p.clone(),
        (None, Some(m)) => m
            .keyframe
            .label
            .clone()
            .ok_or_else(|| Error::Config("manifest keyframe has no labels".into()))?,
        (None, None) => return Err(Error::Config("need --gt or --manifest".into()).into()),
    };
    let gt = load_labels(&gt_path)?;
    let (pred, channels) = match (&a.pred, &a.pred_labels) {
        (Some(p), _) => {
            let t = Tensor::load_mvft(p)?;
            (argmax_labels(&t), Some(t.channels()))
        }
        (None, Some(p)) => (load_labels(p)?, None),
        (None, None) => unreachable!("clap requires a prediction"),
    };
    let classes = a
        .classes
        .or(manifest.as_ref().map(|m| m.num_classes))
        .or(channels)
        .ok_or_else(|| Error::Config("need --classes for label predictions without a manifest".into()))?;
    let mut cm = ConfusionMatrix::new(classes);
    cm.accumulate(&pred, &gt)?;
    print!("{}", cm.report_table()?);
    if let Some(p) = &a.json {
        let s = cm.scores()?;
        write_json(
            p,
            &json!({
                "pixelwise": s.pixelwise,
                "classwise": s.classwise,
                "mean_iou": s.mean_iou,
                "class_iou": cm.class_ious(),
                "confusion": cm.counts(),
                "classes": classes,
            }),
        )?;
    }
    Ok(())
}

fn load_run_config(path: Option<&Path>) -> Result<ToyRunConfig, Error> {
    let Some(path) = path else {
        return Ok(ToyRunConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn cmd_train_toy(a: &TrainToyArgs) -> CmdResult {
    let mut run = load_run_config(a.config.as_deref())?;
    run.train.mode = a.consistency;
    run.train.seed = a.seed;
    if let Some(e) = a.epochs {
        run.train.epochs = e;
    }
    if run.data.num_classes != run.train.net.num_classes {
        return Err(Error::Config(format!(
            "data has {} classes but the network {}",
            run.data.num_classes, run.train.net.num_classes
        ))
        .into());
    }
    run.train.validate()?;
    let levels = run.train.net.levels();
    let prepare = |config: &SyntheticSetConfig, seed: u64| -> Result<Vec<PreparedSequence>, Error> {
        synthetic_set(config, seed)?
            .iter()
            .map(|s| PreparedSequence::new(s, levels))
            .collect()
    };
    let data = prepare(&run.data, a.seed)?;
    create_dir(&a.out)?;
    let log_path = a.out.join("train.log");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let mut io_err = None;
    let params = train(&run.train, &data, |it| {
        if io_err.is_none() {
            io_err = writeln!(log, "{}", it.line()).err();
        }
    })?;
    if let Some(e) = io_err.or_else(|| log.flush().err()) {
        return Err(Error::io(&log_path, e).into());
    }
    let ckpt = a.out.join("checkpoint.mvck");
    save_checkpoint(&ckpt, &params)?;

    let mut report = json!({
        "mode": run.train.mode.as_str(),
        "seed": a.seed,
        "epochs": run.train.epochs,
        "checkpoint": ckpt,
        "log": log_path,
    });
    if run.eval.sequences > 0 {
        let eval_set = SyntheticSetConfig {
            sequences: run.eval.sequences,
            ..run.data.clone()
        };
        let test = prepare(&eval_set, a.seed ^ 0x7e57)?;
        let (single, fused) = evaluate(&params, &test, run.eval.frames)?;
        let (s, f) = (single.scores()?, fused.scores()?);
        println!("{:<12}{:>12}{:>12}{:>12}", "", "pixelwise", "classwise", "mean_iou");
        println!("{:<12}{:>12.4}{:>12.4}{:>12.4}", "single", s.pixelwise, s.classwise, s.mean_iou);
        println!("{:<12}{:>12.4}{:>12.4}{:>12.4}", "fused", f.pixelwise, f.classwise, f.mean_iou);
        report["single"] = json!(s);
        report["fused"] = json!(f);
    }
    println!("{}", ckpt.display());
    if let Some(p) = &a.json {
        write_json(p, &report)?;
    }
    Ok(())
}

fn cmd_grad_check(a: &GradCheckArgs) -> CmdResult {
    let checks = run_suite(a.seed)?;
    println!("{:<32}{:>14}{:>14}{:>8}", "layer", "max_rel_err", "median", "n");
    for c in &checks {
        println!("{:<32}{:>14.3e}{:>14.3e}{:>8}", c.name, c.max_rel_err, c.median_rel_err, c.checked);
    }
    let worst = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    println!("{:<32}{:>14.3e}", "worst", worst);
    if let Some(p) = &a.json {
        let rows: Vec<_> = checks
            .iter()
            .map(|c| json!({"name": c.name, "max_rel_err": c.max_rel_err, "median_rel_err": c.median_rel_err, "checked": c.checked}))
            .collect();
        write_json(p, &json!({"tolerance": GRAD_TOLERANCE, "worst": worst, "checks": rows}))?;
    }
    if !(worst < GRAD_TOLERANCE) {
        return Err(Failure::CheckFailed(format!(
            "gradient check failed: max rel. err {worst:.3e} >= {GRAD_TOLERANCE:e}"
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("mvseg: cannot configure thread pool: {e}");
        return ExitCode::from(EXIT_CONFIG);
    }
    let result = match &cli.command {
        Command::SynthGen(a) => cmd_synth_gen(a),
        Command::Warp(a) => cmd_warp(a),
        Command::Fuse(a) => cmd_fuse(a),
        Command::Eval(a) => cmd_eval(a),
        Command::TrainToy(a) => cmd_train_toy(a),
        Command::GradCheck(a) => cmd_grad_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("mvseg: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::CheckFailed(msg)) => {
            eprintln!("mvseg: {msg}");
            ExitCode::from(EXIT_CHECK_FAILED)
        }
    }
}
