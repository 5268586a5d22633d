//! `trajpool`: build navigation maps, train, evaluate, predict, run
//! leave-one-out sweeps and print reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use trajpool_core::config::{ConfigError, DatasetConfig};
use trajpool_core::evaluation::{
    parse_results_csv, EvalError, ModelPredictor, OraclePredictor, PersistencePredictor, Predictor, AdeDenominator,
};
use trajpool_core::maps::{build_navigation_map, MapError, NavScale};
use trajpool_core::model::{read_checkpoint, ModelError, SigmaSquash, Variant};
use trajpool_core::pipeline::{
    evaluate_on, run_loo, scene_dir_name, train_on, training_data, write_plots, write_report, ErrorKind, LooPlan,
    PipelineConfig, PipelineError, PreparedScene,
};
use trajpool_core::training::Trainer;

/// Relative output directories are resolved against this, when set.
const OUTPUT_ROOT_VAR: &str = "TRAJPOOL_OUTPUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "trajpool", version, about = "Pedestrian trajectory forecasting with pooled LSTMs")]
struct Cli {
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build each scene's navigation map and a grayscale preview.
    BuildNavmap(NavmapArgs),
    /// Train one variant.
    Train(TrainArgs),
    /// Score a checkpoint (or a baseline) on held-out scenes.
    Eval(EvalArgs),
    /// Write rolled-out trajectories and plots without a report.
    Predict(PredictArgs),
    /// Hold out each scene in turn, train on the rest and report.
    Loo(LooArgs),
    /// Combine results files into one table.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Dataset config listing the scenes.
    #[arg(long)]
    dataset: PathBuf,
    /// Run config (TOML) applied before flag overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    knobs: Knobs,
}

#[derive(Args, Debug, Clone, Serialize)]
struct Knobs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    decay: Option<f64>,
    /// Cap on the gradient L2 norm.
    #[arg(long, conflicts_with = "no_clip")]
    grad_clip: Option<f64>,
    /// Disable gradient clipping.
    #[arg(long)]
    no_clip: bool,
    /// Windows per gradient step.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Divide each window's loss by its number of terms.
    #[arg(long)]
    loss_mean: bool,
    /// Also score context pedestrians on predicted frames.
    #[arg(long)]
    predict_partial: bool,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    embed: Option<usize>,
    #[arg(long)]
    social_size: Option<usize>,
    #[arg(long)]
    social_cell: Option<f64>,
    #[arg(long)]
    nav_size: Option<usize>,
    #[arg(long)]
    sem_size: Option<usize>,
    /// Add bias vectors to the embedding and output layers.
    #[arg(long)]
    biases: bool,
    /// exp or softplus.
    #[arg(long)]
    sigma: Option<SigmaSquash>,
    /// Default map cell, meters.
    #[arg(long)]
    map_cell: Option<f64>,
    #[arg(long)]
    nav_kernel: Option<usize>,
    /// raw, log1p or maxnorm.
    #[arg(long)]
    navmap_scale: Option<NavScale>,
    /// Build the held-out navigation map from the whole held-out scene.
    #[arg(long)]
    navmap_from_full_scene: bool,
    /// Fraction of windows kept.
    #[arg(long)]
    subsample: Option<f64>,
    #[arg(long)]
    stride: Option<usize>,
    /// Sampled rollouts per window; 0 rolls out the means.
    #[arg(long)]
    samples: Option<usize>,
    /// terms or window.
    #[arg(long)]
    ade_denominator: Option<AdeDenominator>,
    #[arg(long)]
    plot_windows: Option<usize>,
}

#[derive(Args, Debug)]
struct NavmapArgs {
    #[command(flatten)]
    common: Common,
    /// Only these scenes.
    #[arg(long)]
    scene: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "sns")]
    variant: Variant,
    /// Scene left out of training.
    #[arg(long)]
    held_out: Option<String>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum PredictorKind {
    Model,
    Oracle,
    Persistence,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Scenes to score.
    #[arg(long, required = true)]
    scene: Vec<String>,
    #[arg(long, value_enum, default_value = "model")]
    predictor: PredictorKind,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: String,
}

#[derive(Args, Debug)]
struct LooArgs {
    #[command(flatten)]
    common: Common,
    /// Variants to train; all five when omitted.
    #[arg(long)]
    variant: Vec<Variant>,
    /// Scenes to hold out; all when omitted.
    #[arg(long)]
    held_out: Vec<String>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// `results.csv` files to combine.
    #[arg(long, required = true)]
    results: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
struct Failure {
    kind: ErrorKind,
    message: String,
}

impl Failure {
    fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self.kind {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
            ErrorKind::Io => 5,
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Self::new(e.kind(), e.to_string())
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        let kind = match &e {
            ConfigError::Format { .. } => ErrorKind::Config,
            ConfigError::Io { .. } => ErrorKind::Io,
            ConfigError::Data(_) | ConfigError::Map(_) => ErrorKind::Data,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        PipelineError::from(e).into()
    }
}

impl From<MapError> for Failure {
    fn from(e: MapError) -> Self {
        PipelineError::from(e).into()
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        PipelineError::from(e).into()
    }
}

impl From<trajpool_core::training::TrainError> for Failure {
    fn from(e: trajpool_core::training::TrainError) -> Self {
        PipelineError::from(e).into()
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(ErrorKind::Io, format!("{}: {e}", path.display()))
}

fn output_dir(arg: Option<&Path>, default: &str) -> PathBuf {
    let rel = arg.unwrap_or(Path::new(default));
    if rel.is_absolute() {
        return rel.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) => PathBuf::from(root).join(rel),
        None => rel.to_path_buf(),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn run_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
            toml::from_str(&text).map_err(|e| Failure::new(ErrorKind::Config, format!("{}: {e}", path.display())))?
        }
        None => PipelineConfig::default(),
    };
    let k = &common.knobs;
    let t = &mut cfg.train;
    if let Some(v) = k.seed {
        t.seed = v;
        cfg.eval.seed = v;
    }
    if let Some(v) = k.epochs {
        t.epochs = v;
    }
    if let Some(v) = k.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = k.decay {
        t.decay = v;
    }
    if k.no_clip {
        t.grad_clip = None;
    } else if let Some(v) = k.grad_clip {
        t.grad_clip = Some(v);
    }
    if let Some(v) = k.batch {
        t.batch = v;
    }
    if k.max_steps.is_some() {
        t.max_steps = k.max_steps;
    }
    t.loss_mean |= k.loss_mean;
    t.predict_partial |= k.predict_partial;
    let m = &mut cfg.model;
    if let Some(v) = k.hidden {
        m.hidden = v;
    }
    if let Some(v) = k.embed {
        m.embed = v;
    }
    if let Some(v) = k.social_size {
        m.social_size = v;
    }
    if let Some(v) = k.social_cell {
        m.social_cell = v;
    }
    if let Some(v) = k.nav_size {
        m.nav_size = v;
    }
    if let Some(v) = k.sem_size {
        m.sem_size = v;
    }
    m.biases |= k.biases;
    if let Some(v) = k.sigma {
        m.sigma = v;
    }
    if let Some(v) = k.map_cell {
        cfg.map_cell = v;
    }
    if let Some(v) = k.nav_kernel {
        cfg.nav_kernel = v;
    }
    if let Some(v) = k.navmap_scale {
        cfg.nav_scale = v;
    }
    cfg.navmap_from_full_scene |= k.navmap_from_full_scene;
    if let Some(v) = k.subsample {
        cfg.subsample = v;
    }
    if let Some(v) = k.stride {
        cfg.stride = v;
    }
    if let Some(v) = k.samples {
        cfg.eval.samples = v;
    }
    if let Some(v) = k.ade_denominator {
        cfg.eval.ade_denominator = v;
    }
    if let Some(v) = k.plot_windows {
        cfg.plot_windows = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    argv: Vec<String>,
    version: &'a str,
    dataset: Option<String>,
    config: Option<&'a PipelineConfig>,
}

fn write_manifest(dir: &Path, command: &str, dataset: Option<&Path>, cfg: Option<&PipelineConfig>) -> Result<()> {
    let manifest = Manifest {
        command,
        argv: std::env::args().skip(1).collect(),
        version: env!("CARGO_PKG_VERSION"),
        dataset: dataset.map(|p| p.display().to_string()),
        config: cfg,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join("manifest.json"), &(text + "\n"))
}

fn load_scenes(common: &Common, cfg: &PipelineConfig, only: &[String]) -> Result<Vec<PreparedScene>> {
    let dataset = DatasetConfig::load(&common.dataset)?;
    for name in only {
        if dataset.entry(name).is_none() {
            return Err(Failure::new(ErrorKind::Data, format!("no scene {name:?} in {}", common.dataset.display())));
        }
    }
    dataset
        .scenes
        .iter()
        .filter(|e| only.is_empty() || only.contains(&e.name))
        .map(|e| {
            let loaded = dataset.load_entry(e, cfg.map_cell)?;
            Ok(PreparedScene::new(loaded, cfg)?)
        })
        .collect()
}

fn build_navmap(args: &NavmapArgs) -> Result<()> {
    let cfg = run_config(&args.common)?;
    let out = output_dir(args.common.out.as_deref(), "navmaps");
    create_dir(&out)?;
    let dataset = DatasetConfig::load(&args.common.dataset)?;
    for name in &args.scene {
        if dataset.entry(name).is_none() {
            return Err(Failure::new(ErrorKind::Data, format!("no scene {name:?}")));
        }
    }
    for entry in dataset.scenes.iter().filter(|e| args.scene.is_empty() || args.scene.contains(&e.name)) {
        let loaded = dataset.load_entry(entry, cfg.map_cell)?;
        let map = build_navigation_map(&[&loaded.scene], loaded.grid, cfg.nav_kernel)?;
        let stem = scene_dir_name(&entry.name);
        map.save(&out.join(format!("{stem}.navmap")))?;
        map.save_preview(&out.join(format!("{stem}_navmap.png")))?;
        log::info!("{}: {}x{} navigation map", entry.name, map.transform().rows, map.transform().cols);
    }
    write_manifest(&out, "build-navmap", Some(&args.common.dataset), Some(&cfg))
}

fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg = run_config(&args.common)?;
    let out = output_dir(args.common.out.as_deref(), "train");
    create_dir(&out)?;
    let scenes = load_scenes(&args.common, &cfg, &[])?;
    if let Some(h) = &args.held_out {
        if !scenes.iter().any(|s| s.scene.name() == h) {
            return Err(Failure::new(ErrorKind::Data, format!("no scene {h:?} to hold out")));
        }
    }
    let train: Vec<&PreparedScene> = scenes
        .iter()
        .filter(|s| args.held_out.as_deref() != Some(s.scene.name()))
        .collect();
    match &args.resume {
        Some(path) => {
            let ckpt = read_checkpoint(path)?;
            cfg.model = ckpt.params.config().clone();
            write_manifest(&out, "train", Some(&args.common.dataset), Some(&cfg))?;
            let data = training_data(&train, &cfg);
            let mut trainer = Trainer::resume(ckpt, cfg.train.clone())?;
            trainer.fit(&data, Some(&out))?;
        }
        None => {
            cfg.model.variant = args.variant;
            write_manifest(&out, "train", Some(&args.common.dataset), Some(&cfg))?;
            train_on(&train, args.variant, &cfg, Some(&out))?;
        }
    }
    log::info!("wrote {}", out.join("model.ckpt").display());
    Ok(())
}

fn predictor_for(kind: PredictorKind, checkpoint: Option<&Path>, cfg: &mut PipelineConfig) -> Result<(Box<dyn Predictor>, String)> {
    Ok(match kind {
        PredictorKind::Oracle => (Box::new(OraclePredictor), "oracle".into()),
        PredictorKind::Persistence => (Box::new(PersistencePredictor), "persistence".into()),
        PredictorKind::Model => {
            let path = checkpoint.ok_or_else(|| Failure::new(ErrorKind::Config, "--checkpoint is required for the model predictor"))?;
            let ckpt = read_checkpoint(path)?;
            cfg.model = ckpt.params.config().clone();
            let label = cfg.model.variant.key().to_string();
            (Box::new(ModelPredictor { params: ckpt.params }), label)
        }
    })
}

fn eval(args: &EvalArgs) -> Result<()> {
    let mut cfg = run_config(&args.common)?;
    let out = output_dir(args.common.out.as_deref(), "eval");
    let (predictor, label) = predictor_for(args.predictor, args.checkpoint.as_deref(), &mut cfg)?;
    create_dir(&out)?;
    let scenes = load_scenes(&args.common, &cfg, &args.scene)?;
    let mut results = Vec::new();
    for s in &scenes {
        let r = evaluate_on(s, predictor.as_ref(), &label, &cfg)?;
        write_plots(&s.scene, &r, &cfg, &out.join("plots").join(scene_dir_name(s.scene.name())))?;
        log::info!("{} {label}: ADE {:.3} FDE {:.3}", s.scene.name(), r.ade, r.fde);
        results.push(r);
    }
    let report = write_report(&results, &out)?;
    write_manifest(&out, "eval", Some(&args.common.dataset), Some(&cfg))?;
    print!("{}", report.to_text());
    Ok(())
}

fn predict(args: &PredictArgs) -> Result<()> {
    let mut cfg = run_config(&args.common)?;
    let out = output_dir(args.common.out.as_deref(), "predict");
    let (predictor, label) = predictor_for(PredictorKind::Model, Some(&args.checkpoint), &mut cfg)?;
    create_dir(&out)?;
    let scenes = load_scenes(&args.common, &cfg, std::slice::from_ref(&args.scene))?;
    let s = &scenes[0];
    let r = evaluate_on(s, predictor.as_ref(), &label, &cfg)?;
    write_plots(&s.scene, &r, &cfg, &out)?;
    write_manifest(&out, "predict", Some(&args.common.dataset), Some(&cfg))?;
    log::info!("{} windows written to {}", r.n_windows, out.join("trajectories.csv").display());
    Ok(())
}

fn loo(args: &LooArgs) -> Result<()> {
    let cfg = run_config(&args.common)?;
    let out = output_dir(args.common.out.as_deref(), "loo");
    create_dir(&out)?;
    write_manifest(&out, "loo", Some(&args.common.dataset), Some(&cfg))?;
    let scenes = load_scenes(&args.common, &cfg, &[])?;
    let variants = if args.variant.is_empty() { Variant::ALL.to_vec() } else { args.variant.clone() };
    let plan = LooPlan {
        held_out: (!args.held_out.is_empty()).then_some(args.held_out.as_slice()),
        variants: &variants,
    };
    let results = run_loo(&scenes, &plan, &cfg, Some(&out))?;
    print!("{}", trajpool_core::evaluation::Report::from_results(&results).to_text());
    Ok(())
}

fn report(args: &ReportArgs) -> Result<()> {
    let mut results = Vec::new();
    for path in &args.results {
        let text = std::fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
        results.extend(parse_results_csv(&text, &path.display().to_string())?);
    }
    let text = match &args.out {
        Some(dir) => {
            let dir = output_dir(Some(dir), "report");
            let r = write_report(&results, &dir)?;
            write_manifest(&dir, "report", None, None)?;
            r.to_text()
        }
        None => trajpool_core::evaluation::Report::from_results(&results).to_text(),
    };
    print!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .init();
    let result = match &cli.command {
        Command::BuildNavmap(a) => build_navmap(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Loo(a) => loo(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.exit_code())
        }
    }
}
