use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use sonoseg::distiller::{distill, DistillConfig};
use sonoseg::io::{load_samples, write_atomic, Sample, Split};
use sonoseg::metrics::{evaluate_dataset, write_outcome, EmptyModel, EvalConfig, OracleModel, SegmentationModel};
use sonoseg::model::{load_checkpoint, ModelConfig, PromptSegModel};
use sonoseg::prompting::StartMode;
use sonoseg::service::{serve, ServiceConfig, TrackerKind};
use sonoseg::synth::{generate_cine_loop, generate_dataset, CineObjectSpec, Echogenicity, SynthConfig};
use sonoseg::tracking::{
    aggregate_tracking, load_cine_loop, loop_oracle, run_loop, save_cine_loop, CineLoop, PreviousMaskTracker,
    ShiftTracker, TrackerAdapter, TrackingConfig,
};
use sonoseg::trainer::{fit, RunOutputs, TrainConfig};
use sonoseg::Error;

#[derive(Parser, Debug)]
#[command(name = "sonoseg", version, about = "Interactive promptable segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic speckle dataset (and optionally cine loops).
    Synthgen(SynthgenArgs),
    /// Fine-tune prompt encoder and mask decoder with a frozen image encoder.
    Train(TrainArgs),
    /// Distill a smaller student from a trained teacher checkpoint.
    Distill(DistillArgs),
    /// Click-budget evaluation of a model over a dataset manifest.
    Evaluate(EvaluateArgs),
    /// Track-and-correct evaluation over cine loops.
    TrackEval(TrackEvalArgs),
    /// Serve the HTTP annotation API.
    Serve(ServeArgs),
}

#[derive(Args, Debug, Serialize)]
struct SynthgenArgs {
    /// JSON synthetic-data config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    /// Also write this many cine loops under `<out>/loops`.
    #[arg(long, default_value_t = 0)]
    cine_loops: usize,
    #[arg(long, default_value_t = 20)]
    frames: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// JSON with optional `model`, `model_seed` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    model_seed: Option<u64>,
    /// Start from an existing checkpoint instead of a fresh model.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct DistillArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// JSON distillation config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum StartArg {
    Point,
    Box,
}

#[derive(Args, Debug, Serialize)]
struct EvaluateArgs {
    /// Checkpoint path, or `oracle` / `empty` for the reference adapters.
    #[arg(long)]
    model: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10)]
    budget: usize,
    #[arg(long, value_enum, default_value = "point")]
    start_mode: StartArg,
    #[arg(long, default_value_t = 20)]
    cap: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Only evaluate records with this split tag.
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum TrackerArg {
    Previous,
    Shift,
}

#[derive(Args, Debug, Serialize)]
struct TrackEvalArgs {
    /// Checkpoint path, or `oracle` for ground-truth corrections.
    #[arg(long)]
    model: String,
    #[arg(long, value_enum, default_value = "shift")]
    tracker: TrackerArg,
    /// A loop directory, or a directory whose subdirectories are loops.
    #[arg(long)]
    loops: PathBuf,
    #[arg(long, default_value_t = 0.90)]
    floor: f64,
    #[arg(long, default_value_t = 10)]
    budget: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct ServeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, value_enum, default_value = "shift")]
    tracker: TrackerArg,
    #[arg(long, default_value_t = 0.90)]
    floor: f64,
    /// Idle session timeout in minutes.
    #[arg(long, default_value_t = 30)]
    idle_minutes: u64,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::ConfigMismatch(_) => 1,
            Error::Data { .. }
            | Error::Io { .. }
            | Error::Ingest { .. }
            | Error::ShapeMismatch { .. }
            | Error::EmptyGroundTruth
            | Error::Empty(_)
            | Error::Checkpoint(_) => 2,
            _ => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::from(Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))?;
    serde_json::from_str(&text)
        .map_err(|e| usage(format!("config {}: {e}", path.display())))
}

fn run_dir(out: Option<&PathBuf>, command: &str, seed: u64) -> PathBuf {
    out.cloned().unwrap_or_else(|| {
        let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S");
        PathBuf::from("runs").join(format!("{command}-{stamp}-s{seed}"))
    })
}

#[derive(Serialize)]
struct RunConfig<'a, F: Serialize, C: Serialize> {
    command: &'a str,
    out: &'a Path,
    seed: u64,
    flags: &'a F,
    resolved: &'a C,
}

fn write_run_config<F: Serialize, C: Serialize>(
    dir: &Path,
    command: &str,
    seed: u64,
    flags: &F,
    resolved: &C,
) -> CliResult<()> {
    let rc = RunConfig {
        command,
        out: dir,
        seed,
        flags,
        resolved,
    };
    let text = serde_json::to_string_pretty(&rc).expect("run config serializes");
    Ok(write_atomic(&dir.join("run_config.json"), text.as_bytes())?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    Ok(write_atomic(path, text.as_bytes())?)
}

fn synthgen(args: SynthgenArgs) -> CliResult<()> {
    let mut config: SynthConfig = read_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if args.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    config.validate()?;
    write_run_config(&args.out, "synthgen", config.seed, &args, &config)?;
    let id = args
        .out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "synthetic".into());
    generate_dataset(&config, args.count, &args.out, args.split.into(), &id)?;
    for k in 0..args.cine_loops {
        let cine = synthetic_loop(&config, k as u64, args.frames)?;
        save_cine_loop(&cine, &args.out.join(format!("loops/loop{k:03}")))?;
    }
    println!("{}", args.out.join("manifest.json").display());
    Ok(())
}

/// Two structures drifting and pulsating at loop-specific rates.
fn synthetic_loop(config: &SynthConfig, index: u64, frames: usize) -> Result<CineLoop, Error> {
    let cfg = SynthConfig {
        seed: config.seed.wrapping_add(1000 + index),
        ..config.clone()
    };
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let phase = index as f64 * 0.37;
    let objects = vec![
        (
            "chamber".to_string(),
            CineObjectSpec {
                cx: 0.35 * w,
                cy: 0.45 * h,
                a: 0.16 * w,
                b: 0.12 * h,
                vx: 0.15 * phase.cos(),
                vy: 0.1,
                pulsation: 0.15,
                echogenicity: Echogenicity::Anechoic,
            },
        ),
        (
            "wall".to_string(),
            CineObjectSpec {
                cx: 0.72 * w,
                cy: 0.6 * h,
                a: 0.1 * w,
                b: 0.14 * h,
                vx: -0.1,
                vy: 0.12 * phase.sin(),
                pulsation: 0.1,
                echogenicity: Echogenicity::Hyper,
            },
        ),
    ];
    let view = if index.is_multiple_of(2) { "2ch" } else { "4ch" };
    generate_cine_loop(&cfg, &objects, frames, view)
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainFile {
    model: ModelConfig,
    model_seed: u64,
    train: TrainConfig,
}

fn train(args: TrainArgs) -> CliResult<()> {
    let mut file: TrainFile = read_config(args.config.as_deref())?;
    if let Some(v) = args.epochs {
        file.train.epochs = v;
    }
    if let Some(v) = args.learning_rate {
        file.train.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        file.train.batch_size = v;
    }
    if let Some(v) = args.seed {
        file.train.rng_seed = v;
    }
    if let Some(v) = args.model_seed {
        file.model_seed = v;
    }
    file.model.validate()?;
    file.train.validate()?;
    let dir = run_dir(args.out.as_ref(), "train", file.train.rng_seed);
    write_run_config(&dir, "train", file.train.rng_seed, &args, &file)?;
    let train_samples = load_samples(&args.data, None)?;
    let val_samples = load_samples(&args.val, None)?;
    let model = match &args.init {
        Some(path) => load_checkpoint(path)?.0,
        None => PromptSegModel::init(file.model.clone(), file.model_seed)?,
    };
    let outputs = RunOutputs { dir: dir.clone() };
    let report = fit(&model, &train_samples, &val_samples, &file.train, Some(&outputs))?;
    println!(
        "trained {} epochs; best val DSC {}; checkpoint {}",
        report.epoch_losses.len(),
        report
            .best_val_dsc
            .map_or("n/a".to_string(), |d| format!("{d:.4}")),
        outputs.last_checkpoint().display()
    );
    Ok(())
}

fn distill_cmd(args: DistillArgs) -> CliResult<()> {
    let mut config: DistillConfig = read_config(args.config.as_deref())?;
    if let Some(v) = args.epochs {
        config.train.epochs = v;
    }
    if let Some(v) = args.alpha {
        config.alpha = v;
    }
    if let Some(v) = args.seed {
        config.train.rng_seed = v;
    }
    config.student.validate()?;
    config.train.validate()?;
    let dir = run_dir(args.out.as_ref(), "distill", config.train.rng_seed);
    write_run_config(&dir, "distill", config.train.rng_seed, &args, &config)?;
    let (teacher, _) = load_checkpoint(&args.teacher)?;
    let train_samples = load_samples(&args.data, None)?;
    let val_samples = load_samples(&args.val, None)?;
    let outputs = RunOutputs { dir: dir.clone() };
    let (_, report) = distill(&teacher, &train_samples, &val_samples, &config, Some(&outputs))?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "student {} parameters (ratio {:.3}); checkpoint {}",
        report.student_parameters,
        report.size_ratio,
        outputs.last_checkpoint().display()
    );
    Ok(())
}

enum LoadedModel {
    Checkpoint(PromptSegModel),
    Oracle(OracleModel),
    Empty,
}

impl LoadedModel {
    fn adapter(&self) -> &dyn SegmentationModel {
        match self {
            LoadedModel::Checkpoint(m) => m,
            LoadedModel::Oracle(m) => m,
            LoadedModel::Empty => &EmptyModel,
        }
    }
}

fn evaluate(args: EvaluateArgs) -> CliResult<()> {
    let config = EvalConfig {
        budget: args.budget,
        cap: args.cap,
        start_mode: match args.start_mode {
            StartArg::Point => StartMode::Point,
            StartArg::Box => StartMode::Box,
        },
        seed: args.seed,
        workers: args.workers.max(1),
        ..Default::default()
    };
    if config.budget == 0 || config.cap < config.budget {
        return Err(usage("--budget must be >= 1 and --cap >= --budget"));
    }
    let dir = run_dir(args.out.as_ref(), "evaluate", args.seed);
    write_run_config(&dir, "evaluate", args.seed, &args, &config)?;
    let samples: Vec<Sample> = load_samples(&args.data, args.split.map(Into::into))?;
    let model = match args.model.as_str() {
        "oracle" => LoadedModel::Oracle(OracleModel::new(&samples)),
        "empty" => LoadedModel::Empty,
        path => LoadedModel::Checkpoint(load_checkpoint(Path::new(path))?.0),
    };
    let dataset_id = sonoseg::io::load_manifest(&args.data)?.dataset_id;
    let outcome = evaluate_dataset(model.adapter(), &samples, &dataset_id, &config)?;
    write_outcome(&outcome, &dir)?;
    let r = &outcome.report;
    println!(
        "NoC@80 {:.3} NoC@90 {:.3} FR@80 {:.3} FR@90 {:.3} MaxDSC {:.4} ({} images, {} failed)",
        r.noc80, r.noc90, r.fr80, r.fr90, r.max_dsc, r.trace_count, r.failed_count
    );
    Ok(())
}

fn find_loops(root: &Path) -> CliResult<Vec<PathBuf>> {
    if root.join("loop.json").exists() {
        return Ok(vec![root.to_path_buf()]);
    }
    let entries = std::fs::read_dir(root).map_err(|e| Failure::from(Error::Io {
        path: root.to_path_buf(),
        source: e,
    }))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("loop.json").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Failure {
            code: 2,
            message: format!("no cine loops under {}", root.display()),
        });
    }
    Ok(dirs)
}

fn track_eval(args: TrackEvalArgs) -> CliResult<()> {
    if !(0.0..1.0).contains(&args.floor) {
        return Err(usage("--floor must lie in [0, 1)"));
    }
    let config = TrackingConfig {
        dsc_floor: args.floor,
        click_budget: args.budget,
        seed: args.seed,
        ..Default::default()
    };
    let dir = run_dir(args.out.as_ref(), "track-eval", args.seed);
    write_run_config(&dir, "track-eval", args.seed, &args, &config)?;
    let loops = find_loops(&args.loops)?
        .iter()
        .map(|p| load_cine_loop(p))
        .collect::<Result<Vec<_>, _>>()?;
    let checkpoint = match args.model.as_str() {
        "oracle" => None,
        path => Some(load_checkpoint(Path::new(path))?.0),
    };
    let mut reports = Vec::new();
    for cine in &loops {
        let mut tracker: Box<dyn TrackerAdapter> = match args.tracker {
            TrackerArg::Previous => Box::new(PreviousMaskTracker::default()),
            TrackerArg::Shift => Box::new(ShiftTracker::default()),
        };
        let oracle;
        let model: &dyn SegmentationModel = match &checkpoint {
            Some(m) => m,
            None => {
                oracle = loop_oracle(cine);
                &oracle
            }
        };
        reports.push(run_loop(model, tracker.as_mut(), cine, &config)?);
    }
    let summary = aggregate_tracking(&reports)?;
    write_json(&dir.join("tracking_reports.json"), &reports)?;
    write_json(&dir.join("tracking_summary.json"), &summary)?;
    for s in &summary {
        println!(
            "{} {}: interventions {:.3}, drop {:.4}, clicks/frame {:.3}, clicks/loop {:.3}",
            s.view, s.object_id, s.interventions, s.drop, s.clicks_per_frame, s.clicks_per_loop
        );
    }
    Ok(())
}

fn serve_cmd(args: ServeArgs) -> CliResult<()> {
    let (model, _) = load_checkpoint(&args.model)?;
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .map_err(|e| usage(format!("bad address: {e}")))?;
    let config = ServiceConfig {
        idle_timeout: std::time::Duration::from_secs(args.idle_minutes * 60),
        dsc_floor: args.floor,
        tracker: match args.tracker {
            TrackerArg::Previous => TrackerKind::Previous,
            TrackerArg::Shift => TrackerKind::Shift,
        },
    };
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure {
        code: 3,
        message: e.to_string(),
    })?;
    runtime
        .block_on(serve(model, addr, config))
        .map_err(|e| Failure {
            code: 3,
            message: format!("server: {e}"),
        })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let result = match cli.command {
        Command::Synthgen(a) => synthgen(a),
        Command::Train(a) => train(a),
        Command::Distill(a) => distill_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::TrackEval(a) => track_eval(a),
        Command::Serve(a) => serve_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
