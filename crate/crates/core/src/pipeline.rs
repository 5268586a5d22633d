//! Leave-one-out experiments: map preparation, training on all but one
//! scene, evaluation on the held-out one and the combined report.
//!
//! Training scenes get navigation maps built from all of their own data.
//! The held-out scene's map is rebuilt for every test window from the points
//! seen up to the window's last observed frame, so no future positions leak
//! into it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{LoadedScene, DEFAULT_MAP_CELL};
use crate::dataset::{make_windows, subsample, DataError, Scene, Window};
use crate::evaluation::{
    aggregate, results_csv, score_window, trajectory_csv, window_svg, EvalConfig, EvalError, EvalResult, ModelPredictor,
    Predictor, Report, TRAJECTORY_CSV_HEADER,
};
use crate::maps::{box_smooth, count_points, CellHistograms, GridTransform, MapError, NavScale, NavigationMap};
use crate::model::{ModelConfig, ModelError, ModelParams, SceneContext, Variant};
use crate::training::{TrainConfig, TrainError, TrainScene, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Default map cell when a scene does not set its own.
    pub map_cell: f64,
    /// Side of the smoothing box applied to navigation counts, in cells.
    pub nav_kernel: usize,
    pub nav_scale: NavScale,
    /// Build the held-out navigation map from the whole held-out scene.
    pub navmap_from_full_scene: bool,
    /// Fraction of windows kept, for both training and evaluation.
    pub subsample: f64,
    /// Frames between consecutive window starts.
    pub stride: usize,
    /// Windows per evaluation rendered as SVG.
    pub plot_windows: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            map_cell: DEFAULT_MAP_CELL,
            nav_kernel: 3,
            nav_scale: NavScale::default(),
            navmap_from_full_scene: false,
            subsample: 1.0,
            stride: 1,
            plot_windows: 3,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.train.validate()?;
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if !(self.subsample > 0.0) {
            return bad("subsample must be positive");
        }
        if self.nav_kernel == 0 || self.nav_kernel % 2 == 0 {
            return bad("navigation kernel must be odd");
        }
        if !(self.map_cell > 0.0 && self.map_cell.is_finite()) {
            return bad("map cell must be positive");
        }
        if self.model.hidden == 0 || self.model.embed == 0 {
            return bad("hidden and embedding sizes must be positive");
        }
        if self.eval.obs_len == 0 || self.eval.seq_len <= self.eval.obs_len {
            return bad("need 0 < obs_len < seq_len");
        }
        Ok(())
    }

    fn for_variant(&self, variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            ..self.model.clone()
        }
    }
}

/// Failure classes that map to distinct process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Io,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn model_kind(e: &ModelError) -> ErrorKind {
    match e {
        ModelError::NonFiniteLoss { .. } | ModelError::Autodiff(_) => ErrorKind::Numeric,
        ModelError::Io { .. } => ErrorKind::Io,
        ModelError::MissingMap(..) => ErrorKind::Data,
        _ => ErrorKind::Config,
    }
}

impl PipelineError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Self::Config(_) => ErrorKind::Config,
            Self::Data(_) | Self::Map(_) => ErrorKind::Data,
            Self::Io { .. } => ErrorKind::Io,
            Self::Model(e) => model_kind(e),
            Self::Train(e) => match e {
                TrainError::Model(m) => model_kind(m),
                TrainError::NonFiniteGradient { .. } | TrainError::TooManySkipped { .. } => ErrorKind::Numeric,
                TrainError::NoWindows => ErrorKind::Data,
                TrainError::Config(_) => ErrorKind::Config,
                TrainError::Io { .. } => ErrorKind::Io,
            },
            Self::Eval(e) => match e {
                EvalError::Model(m) => model_kind(m),
                EvalError::Parse { .. } => ErrorKind::Data,
                EvalError::Empty | EvalError::Mismatch(_) => ErrorKind::Data,
            },
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write(path: &Path, text: &str) -> Result<(), PipelineError> {
    std::fs::write(path, text).map_err(io_err(path))
}

/// A scene with its navigation map and semantic cell histograms.
pub struct PreparedScene {
    pub scene: Scene,
    pub grid: GridTransform,
    /// Built from every point of the scene.
    pub nav: Option<NavigationMap>,
    pub sem: Option<CellHistograms>,
}

impl PreparedScene {
    pub fn new(loaded: LoadedScene, cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        let LoadedScene { scene, grid, semantic } = loaded;
        let nav = match NavigationMap::from_points(scene.points(), grid, cfg.nav_kernel) {
            Ok(m) => Some(m.scaled(cfg.nav_scale)),
            Err(MapError::EmptyTraining) => None,
            Err(e) => return Err(e.into()),
        };
        let sem = semantic.map(|s| s.cell_histograms(&grid));
        Ok(Self { scene, grid, nav, sem })
    }

    pub fn context(&self) -> SceneContext<'_> {
        SceneContext {
            scene: &self.scene,
            nav: self.nav.as_ref(),
            sem: self.sem.as_ref(),
        }
    }

    /// Windows kept under the configured stride and subsampling.
    pub fn windows(&self, cfg: &PipelineConfig) -> Vec<Window> {
        subsample(make_windows(&self.scene, cfg.stride), cfg.subsample, cfg.train.seed)
    }
}

/// Navigation maps of one scene restricted to points up to a frame, built
/// incrementally for increasing frames.
pub struct OnlineNavigation<'a> {
    scene: &'a Scene,
    grid: GridTransform,
    kernel: usize,
    scale: NavScale,
    counts: Vec<f64>,
    /// Frames `0..counted` are already in `counts`.
    counted: usize,
}

impl<'a> OnlineNavigation<'a> {
    pub fn new(scene: &'a Scene, grid: GridTransform, kernel: usize, scale: NavScale) -> Self {
        Self {
            scene,
            grid,
            kernel,
            scale,
            counts: vec![0.0; grid.len()],
            counted: 0,
        }
    }

    fn frame_points(&self, f: usize) -> impl Iterator<Item = [f64; 2]> + '_ {
        let tracks = self.scene.tracks();
        self.scene.present(f).iter().filter_map(move |&t| tracks[t].at(f))
    }

    /// Map of every point at frame indices `0..=last`.
    pub fn through(&mut self, last: usize) -> Result<NavigationMap, MapError> {
        let upto = (last + 1).min(self.scene.frames().len());
        if upto < self.counted {
            self.counts.iter_mut().for_each(|c| *c = 0.0);
            self.counted = 0;
        }
        for f in self.counted..upto {
            let (c, _) = count_points(self.frame_points(f), &self.grid);
            for (a, b) in self.counts.iter_mut().zip(c) {
                *a += b;
            }
        }
        self.counted = upto;
        let values = box_smooth(&self.counts, self.grid.rows, self.grid.cols, self.kernel)?;
        Ok(NavigationMap::from_values(self.grid, values)?.scaled(self.scale))
    }
}

/// Training windows of every scene, with full-scene maps.
pub fn training_data<'a>(scenes: &[&'a PreparedScene], cfg: &PipelineConfig) -> Vec<TrainScene<'a>> {
    scenes
        .iter()
        .map(|s| TrainScene {
            ctx: s.context(),
            windows: s.windows(cfg),
        })
        .collect()
}

/// Trains one variant from scratch on `scenes`. With `out_dir`, training
/// logs and checkpoints go there.
pub fn train_on(scenes: &[&PreparedScene], variant: Variant, cfg: &PipelineConfig, out_dir: Option<&Path>) -> Result<ModelParams, PipelineError> {
    let data = training_data(scenes, cfg);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        for stale in ["train_log.csv", "epochs.csv"] {
            let p = dir.join(stale);
            if p.exists() {
                std::fs::remove_file(&p).map_err(io_err(&p))?;
            }
        }
    }
    let params = ModelParams::init(cfg.for_variant(variant), cfg.train.seed);
    let mut trainer = Trainer::new(params, cfg.train.clone())?;
    trainer.fit(&data, out_dir)?;
    Ok(trainer.params)
}

/// Scores `predictor` on the held-out `scene`.
pub fn evaluate_on(scene: &PreparedScene, predictor: &dyn Predictor, label: &str, cfg: &PipelineConfig) -> Result<EvalResult, PipelineError> {
    let mut windows = scene.windows(cfg);
    windows.sort_by_key(|w| w.start);
    let mut online = OnlineNavigation::new(&scene.scene, scene.grid, cfg.nav_kernel, cfg.nav_scale);
    let mut per_window = Vec::with_capacity(windows.len());
    for w in &windows {
        let held_out_map;
        let nav = if cfg.navmap_from_full_scene {
            scene.nav.as_ref()
        } else {
            held_out_map = online.through(w.start + cfg.eval.obs_len - 1)?;
            Some(&held_out_map)
        };
        let ctx = SceneContext {
            scene: &scene.scene,
            nav,
            sem: scene.sem.as_ref(),
        };
        per_window.push(score_window(&ctx, w, predictor, &cfg.eval)?);
    }
    Ok(aggregate(scene.scene.name(), label, per_window)?)
}

/// Writes `trajectories.csv` for every scored window and SVGs for the first
/// `cfg.plot_windows` of them.
pub fn write_plots(scene: &Scene, result: &EvalResult, cfg: &PipelineConfig, dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut csv = format!("{TRAJECTORY_CSV_HEADER}\n");
    let (obs, seq) = (cfg.eval.obs_len, cfg.eval.seq_len);
    for (i, m) in result.per_window.iter().enumerate() {
        let window = Window {
            start: m.start,
            targets: m.targets.clone(),
            context: Vec::new(),
        };
        csv.push_str(&trajectory_csv(scene, &window, &m.predicted, obs, seq));
        if i < cfg.plot_windows {
            let path = dir.join(format!("window_{:06}.svg", scene.frames()[m.start]));
            write(&path, &window_svg(scene, &window, &m.predicted, obs, seq))?;
        }
    }
    write(&dir.join("trajectories.csv"), &csv)
}

/// Writes `results.csv`, `report.txt` and `report.csv` into `dir`.
pub fn write_report(results: &[EvalResult], dir: &Path) -> Result<Report, PipelineError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let report = Report::from_results(results);
    write(&dir.join("results.csv"), &results_csv(results))?;
    write(&dir.join("report.txt"), &report.to_text())?;
    write(&dir.join("report.csv"), &report.to_csv())?;
    Ok(report)
}

/// Directory name of a scene under an output root.
pub fn scene_dir_name(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c.to_ascii_lowercase() } else { '_' }).collect()
}

/// Which scenes to hold out in turn; `None` means all of them.
pub struct LooPlan<'a> {
    pub held_out: Option<&'a [String]>,
    pub variants: &'a [Variant],
}

/// Trains and evaluates every variant once per held-out scene. With
/// `out_dir`, each run gets `<scene>/<variant>/` with training logs,
/// checkpoint and plots, and the combined report lands in `out_dir`.
pub fn run_loo(scenes: &[PreparedScene], plan: &LooPlan<'_>, cfg: &PipelineConfig, out_dir: Option<&Path>) -> Result<Vec<EvalResult>, PipelineError> {
    cfg.validate()?;
    if scenes.len() < 2 {
        return Err(PipelineError::Config("leave-one-out needs at least two scenes".into()));
    }
    let names: Vec<&str> = scenes.iter().map(|s| s.scene.name()).collect();
    let held: Vec<&str> = match plan.held_out {
        Some(list) => list
            .iter()
            .map(|n| {
                names
                    .iter()
                    .copied()
                    .find(|m| m == n)
                    .ok_or_else(|| PipelineError::Data(DataError::UnknownScene(n.clone())))
            })
            .collect::<Result<_, _>>()?,
        None => names.clone(),
    };
    let mut results = Vec::new();
    for test_name in held {
        let test = scenes.iter().find(|s| s.scene.name() == test_name).expect("names come from scenes");
        let train: Vec<&PreparedScene> = scenes.iter().filter(|s| s.scene.name() != test_name).collect();
        for &variant in plan.variants {
            log::info!("held out {test_name}: training {}", variant.label());
            let run_dir: Option<PathBuf> = out_dir.map(|d| d.join(scene_dir_name(test_name)).join(variant.key()));
            let params = train_on(&train, variant, cfg, run_dir.as_deref())?;
            let result = evaluate_on(test, &ModelPredictor { params }, variant.key(), cfg)?;
            log::info!("{test_name} {}: ADE {:.3} FDE {:.3}", variant.label(), result.ade, result.fde);
            if let Some(dir) = &run_dir {
                write_plots(&test.scene, &result, cfg, &dir.join("plots"))?;
            }
            results.push(result);
        }
    }
    if let Some(dir) = out_dir {
        write_report(&results, dir)?;
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{OraclePredictor, PersistencePredictor};
    use crate::maps::SemanticMap;
    use crate::synthetic::{constant_velocity_scene, WalkerSpec};

    fn small_cfg() -> PipelineConfig {
        PipelineConfig {
            model: ModelConfig {
                hidden: 8,
                embed: 4,
                nav_size: 4,
                sem_size: 4,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                epochs: 1,
                ..TrainConfig::default()
            },
            subsample: 0.2,
            stride: 2,
            ..PipelineConfig::default()
        }
    }

    fn prepared(name: &str, seed: u64, cfg: &PipelineConfig) -> PreparedScene {
        let spec = WalkerSpec {
            pedestrians: 8,
            frames: 60,
            ..WalkerSpec::default()
        };
        let scene = constant_velocity_scene(name, &spec, seed);
        let grid = GridTransform::for_scene(&scene, 0.5, 2.0).unwrap();
        let semantic = Some(SemanticMap::uniform(grid, crate::maps::SemanticClass::Sidewalk));
        PreparedScene::new(LoadedScene { scene, grid, semantic }, cfg).unwrap()
    }

    #[test]
    fn online_map_matches_a_map_built_from_the_prefix() {
        let cfg = small_cfg();
        let p = prepared("a", 1, &cfg);
        let mut online = OnlineNavigation::new(&p.scene, p.grid, 3, NavScale::Raw);
        for last in [5usize, 12, 30, 7, 59, 200] {
            let upto = (last + 1).min(p.scene.frames().len());
            let pts: Vec<[f64; 2]> = (0..upto)
                .flat_map(|f| p.scene.tracks().iter().filter_map(move |t| t.at(f)))
                .collect();
            let want = NavigationMap::from_points(pts, p.grid, 3).unwrap();
            assert_eq!(online.through(last).unwrap(), want, "last {last}");
        }
        // the whole scene reproduces the training-style map
        let full = NavigationMap::from_points(p.scene.points(), p.grid, 3).unwrap();
        assert_eq!(online.through(1000).unwrap().scaled(cfg.nav_scale), full.scaled(cfg.nav_scale));
    }

    #[test]
    fn held_out_map_ignores_future_points() {
        let cfg = small_cfg();
        let p = prepared("a", 2, &cfg);
        let mut online = OnlineNavigation::new(&p.scene, p.grid, 1, NavScale::Raw);
        let m = online.through(10).unwrap();
        let future: Vec<[f64; 2]> = (11..p.scene.frames().len())
            .flat_map(|f| p.scene.tracks().iter().filter_map(move |t| t.at(f)))
            .collect();
        let total: f64 = m.values().iter().sum();
        let past = (0..=10).map(|f| p.scene.present(f).len()).sum::<usize>();
        assert_eq!(total, past as f64);
        assert!(!future.is_empty());
    }

    #[test]
    fn oracle_scores_zero_on_the_held_out_path() {
        let cfg = small_cfg();
        let p = prepared("a", 3, &cfg);
        let r = evaluate_on(&p, &OraclePredictor, "oracle", &cfg).unwrap();
        assert_eq!((r.ade, r.fde), (0.0, 0.0));
        assert!(r.n_windows >= 1);
        let q = evaluate_on(&p, &PersistencePredictor, "persistence", &cfg).unwrap();
        assert!(q.fde > 0.0);
    }

    #[test]
    fn two_scene_sweep_writes_two_rows_and_repeats_exactly() {
        let cfg = small_cfg();
        let scenes = vec![prepared("A", 4, &cfg), prepared("B", 5, &cfg)];
        let dir = tempfile::tempdir().unwrap();
        let plan = LooPlan {
            held_out: None,
            variants: &[Variant::SNS],
        };
        let r1 = run_loo(&scenes, &plan, &cfg, Some(dir.path())).unwrap();
        assert_eq!(r1.len(), 2);
        assert!(r1.iter().all(|r| r.ade.is_finite() && r.fde.is_finite()));
        let text = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(dir.path().join("a/sns/model.ckpt").exists());
        assert!(dir.path().join("b/sns/plots/trajectories.csv").exists());
        let r2 = run_loo(&scenes, &plan, &cfg, None).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn unknown_held_out_scene_is_a_data_error() {
        let cfg = small_cfg();
        let scenes = vec![prepared("A", 4, &cfg), prepared("B", 5, &cfg)];
        let names = vec!["C".to_string()];
        let plan = LooPlan {
            held_out: Some(&names),
            variants: &[Variant::Vanilla],
        };
        let e = run_loo(&scenes, &plan, &cfg, None).unwrap_err();
        assert_eq!(e.kind(), ErrorKind::Data);
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_cfg();
        cfg.nav_kernel = 2;
        assert_eq!(cfg.validate().unwrap_err().kind(), ErrorKind::Config);
        let mut cfg = small_cfg();
        cfg.train.decay = 1.5;
        assert_eq!(cfg.validate().unwrap_err().kind(), ErrorKind::Config);
        let text = serde_json::to_string(&small_cfg()).unwrap();
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, small_cfg());
    }
}
