//! `cef`: command-line front end of the contrast-enhancement forensics
//! toolkit.
//!
//! Exit codes: 0 success, 1 module error, 2 usage error (no or missing
//! arguments), 3 unknown command, 4 bad flag or settings value, 5 gradient
//! check above tolerance.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use cef::dataset::{
    build_scenario, CropMode, DatasetManifest, Representation, Scenario, ScenarioConfig, SourceSpec, Split,
    MANIFEST_FILE,
};
use cef::enhance::{dmax_curve, format_curve, gap_distribution, GapClass};
use cef::models::{gradcheck_model, ModelKind};
use cef::nn::{load_checkpoint, GradCheckOptions, TrainConfig};
use cef::trainer::{baseline_eval, detect, evaluate, scaling_csv, scaling_study, train, TrainOptions};

mod config;

use config::{List, Settings};

/// Largest relative error `gradcheck` accepts.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    UnknownCommand(String),
    BadFlag(String),
    Module(cef::Error),
    GradCheckFailed(f64),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Module(_) => 1,
            CliError::Usage(_) => 2,
            CliError::UnknownCommand(_) => 3,
            CliError::BadFlag(_) => 4,
            CliError::GradCheckFailed(_) => 5,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(s) => f.write_str(s),
            CliError::UnknownCommand(s) => write!(f, "error: unknown command: {s}"),
            CliError::BadFlag(s) => write!(f, "error: {s}"),
            CliError::Module(e) => write!(f, "error: {e}"),
            CliError::GradCheckFailed(v) => {
                write!(f, "error: max relative error {v:e} exceeds {GRADCHECK_TOLERANCE:e}")
            }
        }
    }
}

impl From<cef::Error> for CliError {
    fn from(e: cef::Error) -> Self {
        CliError::Module(e)
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "cef", version, about = "Contrast-enhancement forensics toolkit", arg_required_else_help = true)]
struct Cli {
    /// Settings file with `key = value` lines; flags override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build scenario datasets
    Dataset {
        #[command(subcommand)]
        action: DatasetCmd,
    },
    /// Train a detector
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split
    Eval(EvalArgs),
    /// Classify images with a checkpoint
    Detect(DetectArgs),
    /// Gap-count threshold baseline
    Baseline(ManifestArg),
    /// Closed-form and histogram analyses
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCmd,
    },
    /// Train both detectors on nested subsets of the training data
    ScalingStudy(ScalingArgs),
    /// Finite-difference gradient check of a fresh detector
    Gradcheck(GradcheckArgs),
}

#[derive(Subcommand, Debug)]
enum DatasetCmd {
    /// Build a scenario and write its manifest
    Build(BuildArgs),
}

#[derive(Subcommand, Debug)]
enum AnalyzeCmd {
    /// Maximum pixel difference (as a fraction of 255) over a gamma grid
    DmaxCurve {
        #[arg(long = "from")]
        from: f64,
        #[arg(long)]
        to: f64,
        #[arg(long)]
        steps: usize,
    },
    /// Gap-count frequency table per class
    GapStats(ManifestArg),
}

#[derive(Args, Debug)]
struct BuildArgs {
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory of source PGM images
    #[arg(long)]
    source_dir: Option<PathBuf>,
    /// Number of synthetic source images (default: sum of split sizes)
    #[arg(long)]
    synthetic_count: Option<usize>,
    /// Side of synthetic source images (default: patch size)
    #[arg(long)]
    source_size: Option<usize>,
    /// plain, prejpeg, anti or prejpeg_anti
    #[arg(long)]
    scenario: Option<Scenario>,
    #[arg(long)]
    gammas: Option<List<f64>>,
    #[arg(long)]
    qualities: Option<List<u8>>,
    #[arg(long)]
    patch_size: Option<usize>,
    /// central or tiles
    #[arg(long)]
    crop_mode: Option<CropMode>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    val_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainFlags {
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    lr_step: Option<usize>,
    #[arg(long)]
    lr_factor: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    val_every: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// pcnn or hcnn
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Final checkpoint path; the best-validation one gets a `.best` infix
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to fine-tune from
    #[arg(long)]
    init: Option<PathBuf>,
    /// Per-iteration loss log (CSV)
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// train, val or test
    #[arg(long, default_value = "test")]
    split: Split,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// pixel or histogram
    #[arg(long)]
    mode: Representation,
    /// PGM images
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct ManifestArg {
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ScalingArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Training-set sizes in original/enhanced pairs
    #[arg(long)]
    sizes: Option<List<usize>>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    seed: Option<u64>,
}

fn manifest_path(s: &Settings, flag: Option<PathBuf>) -> CliResult<PathBuf> {
    let p: PathBuf = s.require(flag, "manifest")?;
    Ok(if p.is_dir() { p.join(MANIFEST_FILE) } else { p })
}

fn load_manifest(path: &Path) -> CliResult<(DatasetManifest, PathBuf)> {
    let m = DatasetManifest::load(path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((m, root))
}

fn train_config(s: &Settings, f: TrainFlags) -> CliResult<(TrainConfig, u64)> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        batch_size: s.or(f.batch_size, "batch_size", d.batch_size)?,
        base_lr: s.or(f.base_lr, "base_lr", d.base_lr)?,
        lr_step: s.or(f.lr_step, "lr_step", d.lr_step)?,
        lr_factor: s.or(f.lr_factor, "lr_factor", d.lr_factor)?,
        max_iter: s.or(f.max_iter, "max_iter", d.max_iter)?,
        momentum: s.or(f.momentum, "momentum", d.momentum)?,
        weight_decay: s.or(f.weight_decay, "weight_decay", d.weight_decay)?,
        seed: s.or(f.seed, "seed", d.seed)?,
        classes: d.classes,
    };
    let val_every = s.or(f.val_every, "val_every", TrainOptions::default().val_every)?;
    Ok((cfg, val_every))
}

fn cmd_dataset_build(s: &Settings, a: BuildArgs) -> CliResult {
    let d = ScenarioConfig::default();
    let cfg = ScenarioConfig {
        scenario: s.or(a.scenario, "scenario", d.scenario)?,
        gammas: s.or(a.gammas, "gammas", List(d.gammas))?.0,
        qualities: s.or(a.qualities, "qualities", List(d.qualities))?.0,
        patch_size: s.or(a.patch_size, "patch_size", d.patch_size)?,
        crop_mode: s.or(a.crop_mode, "crop_mode", d.crop_mode)?,
        split_sizes: (
            s.or(a.train_size, "train_size", d.split_sizes.0)?,
            s.or(a.val_size, "val_size", d.split_sizes.1)?,
            s.or(a.test_size, "test_size", d.split_sizes.2)?,
        ),
        seed: s.or(a.seed, "seed", d.seed)?,
    };
    let out: PathBuf = s.require(a.out, "out")?;
    let source = match s.pick(a.source_dir, "source_dir")? {
        Some(dir) => SourceSpec::Directory(dir),
        None => SourceSpec::Synthetic {
            seed: cfg.seed,
            count: s.or(a.synthetic_count, "synthetic_count", cfg.sources_needed())?,
            size: s.or(a.source_size, "source_size", cfg.patch_size)?,
        },
    };
    let m = build_scenario(&source, &cfg, &out)?;
    println!(
        "scenario {} entries {} sources {} manifest {}",
        m.scenario(),
        m.entries.len(),
        m.sources().len(),
        out.join(MANIFEST_FILE).display()
    );
    Ok(())
}

fn cmd_train(s: &Settings, a: TrainArgs) -> CliResult {
    let model: ModelKind = s.require(a.model, "model")?;
    let (manifest, root) = load_manifest(&manifest_path(s, a.manifest)?)?;
    let out: PathBuf = s.require(a.out, "out")?;
    let init = s.pick(a.init, "init")?.map(|p: PathBuf| load_checkpoint(&p)).transpose()?;
    let (cfg, val_every) = train_config(s, a.train)?;
    let opts = TrainOptions {
        val_every,
        out: Some(out),
    };
    let outcome = train(model, &manifest, &root, &cfg, &opts, init.as_ref())?;
    if let Some(log) = s.pick(a.log, "log")? {
        let log: PathBuf = log;
        std::fs::write(&log, outcome.log.steps_csv()).map_err(cef::Error::from)?;
    }
    print!("{}", outcome.log.val_csv());
    Ok(())
}

fn cmd_eval(s: &Settings, a: EvalArgs) -> CliResult {
    let ckpt = load_checkpoint(&s.require::<PathBuf>(a.checkpoint, "checkpoint")?)?;
    let (manifest, root) = load_manifest(&manifest_path(s, a.manifest)?)?;
    print!("{}", evaluate(&ckpt, &manifest, &root, a.split)?.to_csv());
    Ok(())
}

fn cmd_detect(s: &Settings, a: DetectArgs) -> CliResult {
    let ckpt = load_checkpoint(&s.require::<PathBuf>(a.checkpoint, "checkpoint")?)?;
    println!("path,label,confidence");
    for d in detect(&ckpt, &a.images, a.mode)? {
        println!("{},{},{:.6}", d.path.display(), d.label, d.confidence);
    }
    Ok(())
}

fn cmd_baseline(s: &Settings, a: ManifestArg) -> CliResult {
    let (manifest, root) = load_manifest(&manifest_path(s, a.manifest)?)?;
    print!("{}", baseline_eval(&manifest, &root)?.to_csv());
    Ok(())
}

fn cmd_analyze(s: &Settings, what: AnalyzeCmd) -> CliResult {
    match what {
        AnalyzeCmd::DmaxCurve { from, to, steps } => {
            print!("{}", format_curve(("gamma", "dmax"), &dmax_curve(from, to, steps)?));
        }
        AnalyzeCmd::GapStats(a) => {
            let (manifest, root) = load_manifest(&manifest_path(s, a.manifest)?)?;
            let mut classes = vec![GapClass::Original];
            classes.extend(manifest.gammas().into_iter().map(GapClass::Enhanced));
            print!("{}", gap_distribution(&manifest, &root, &classes)?.to_csv());
        }
    }
    Ok(())
}

fn cmd_scaling(s: &Settings, a: ScalingArgs) -> CliResult {
    let (manifest, root) = load_manifest(&manifest_path(s, a.manifest)?)?;
    let sizes: List<usize> = s.require(a.sizes, "sizes")?;
    let (cfg, val_every) = train_config(s, a.train)?;
    let opts = TrainOptions { val_every, out: None };
    print!("{}", scaling_csv(&scaling_study(&sizes.0, &manifest, &root, &cfg, &opts)?));
    Ok(())
}

fn cmd_gradcheck(s: &Settings, a: GradcheckArgs) -> CliResult {
    let model: ModelKind = s.require(a.model, "model")?;
    let seed: u64 = s.or(a.seed, "seed", 1)?;
    let opts = GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    };
    let r = gradcheck_model(model, seed, &opts)?;
    println!("model {model}");
    println!("max_rel_error {:e}", r.max_rel_error);
    println!("checked {}", r.checked);
    println!("skipped_kinks {}", r.skipped_kinks);
    println!("shadowed_max_abs {:e}", r.shadowed_max_abs);
    if let Some(w) = &r.worst {
        println!("worst {w}");
    }
    if r.max_rel_error < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::GradCheckFailed(r.max_rel_error))
    }
}

fn set_threads() -> CliResult {
    if let Ok(v) = std::env::var("CEF_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::BadFlag(format!("CEF_THREADS must be a positive integer, got {v:?}")))?;
        // a pool already built in this process keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn parse(args: Vec<OsString>) -> CliResult<Cli> {
    Cli::try_parse_from(args).map_err(|e| match e.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => CliError::Usage(e.to_string()),
        ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand | ErrorKind::MissingSubcommand => {
            CliError::Usage(e.to_string())
        }
        ErrorKind::InvalidSubcommand => CliError::UnknownCommand(
            e.get(clap::error::ContextKind::InvalidSubcommand)
                .map(|v| v.to_string())
                .unwrap_or_else(|| e.to_string()),
        ),
        _ => CliError::BadFlag(e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string()),
    })
}

fn run(args: Vec<OsString>) -> CliResult {
    let help_requested = args.iter().skip(1).any(|a| a == "--help" || a == "-h" || a == "--version" || a == "-V");
    let cli = match parse(args) {
        Ok(c) => c,
        Err(CliError::Usage(text)) if help_requested => {
            print!("{text}");
            return Ok(());
        }
        Err(e) => return Err(e),
    };
    set_threads()?;
    let s = Settings::load(cli.config.as_deref())?;
    match cli.command {
        Command::Dataset {
            action: DatasetCmd::Build(a),
        } => cmd_dataset_build(&s, a),
        Command::Train(a) => cmd_train(&s, a),
        Command::Eval(a) => cmd_eval(&s, a),
        Command::Detect(a) => cmd_detect(&s, a),
        Command::Baseline(a) => cmd_baseline(&s, a),
        Command::Analyze { what } => cmd_analyze(&s, what),
        Command::ScalingStudy(a) => cmd_scaling(&s, a),
        Command::Gradcheck(a) => cmd_gradcheck(&s, a),
    }
}

fn main() -> ExitCode {
    match run(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
