//! Rollouts on held-out windows and displacement metrics.

mod plot;
mod report;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::dataset::{Window, OBS_LEN, SEQ_LEN};
use crate::model::{forward_window, BoundParams, ForwardOptions, ModelError, ModelParams, RolloutMode, SceneContext};

pub use plot::{trajectory_csv, window_svg, TRAJECTORY_CSV_HEADER};
pub use report::{parse_results_csv, results_csv, scene_rank, Report, PUBLISHED_AVERAGES, RESULTS_HEADER};

/// Predicted positions per target, each `seq_len − obs_len` long.
pub type Rollout = Vec<Vec<[f64; 2]>>;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no predictions to score")]
    Empty,
    #[error("prediction and truth differ in {0}")]
    Mismatch(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
}

/// What ADE divides the summed distances by.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdeDenominator {
    /// The number of summed terms: pedestrians × predicted frames.
    #[default]
    Terms,
    /// Pedestrians × all window frames, observed ones included.
    Window,
}

impl std::str::FromStr for AdeDenominator {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "terms" => Ok(Self::Terms),
            "window" => Ok(Self::Window),
            _ => Err(format!("unknown ADE denominator {s:?} (terms, window)")),
        }
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn check(pred: &[Vec<[f64; 2]>], truth: &[Vec<[f64; 2]>]) -> Result<usize, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::Mismatch("pedestrian count"));
    }
    let len = pred.first().map_or(0, Vec::len);
    if pred.is_empty() || len == 0 {
        return Err(EvalError::Empty);
    }
    if pred.iter().chain(truth).any(|p| p.len() != len) {
        return Err(EvalError::Mismatch("trajectory length"));
    }
    Ok(len)
}

fn distance_sum(pred: &[Vec<[f64; 2]>], truth: &[Vec<[f64; 2]>]) -> f64 {
    pred.iter()
        .zip(truth)
        .flat_map(|(p, t)| p.iter().zip(t).map(|(a, b)| dist(*a, *b)))
        .sum()
}

/// Mean Euclidean distance over every pedestrian and predicted frame.
pub fn ade(pred: &[Vec<[f64; 2]>], truth: &[Vec<[f64; 2]>]) -> Result<f64, EvalError> {
    let len = check(pred, truth)?;
    Ok(distance_sum(pred, truth) / (pred.len() * len) as f64)
}

/// ADE under a chosen denominator; `obs_len` only matters for
/// [`AdeDenominator::Window`].
pub fn ade_with(pred: &[Vec<[f64; 2]>], truth: &[Vec<[f64; 2]>], denominator: AdeDenominator, obs_len: usize) -> Result<f64, EvalError> {
    let len = check(pred, truth)?;
    let per_ped = match denominator {
        AdeDenominator::Terms => len,
        AdeDenominator::Window => len + obs_len,
    };
    Ok(distance_sum(pred, truth) / (pred.len() * per_ped) as f64)
}

/// Mean Euclidean distance at the last predicted frame.
pub fn fde(pred: &[Vec<[f64; 2]>], truth: &[Vec<[f64; 2]>]) -> Result<f64, EvalError> {
    let len = check(pred, truth)?;
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| dist(p[len - 1], t[len - 1])).sum();
    Ok(s / pred.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Number of sampled rollouts per window; zero rolls out the means.
    pub samples: usize,
    pub ade_denominator: AdeDenominator,
    pub seed: u64,
    pub obs_len: usize,
    pub seq_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 0,
            ade_denominator: AdeDenominator::Terms,
            seed: 0,
            obs_len: OBS_LEN,
            seq_len: SEQ_LEN,
        }
    }
}

/// Anything that forecasts the targets of a window.
pub trait Predictor {
    /// One or more rollouts of the window's targets.
    fn predict(&self, ctx: &SceneContext<'_>, window: &Window, cfg: &EvalConfig) -> Result<Vec<Rollout>, EvalError>;
}

/// Ground truth future positions of the targets.
pub fn truth_of(ctx: &SceneContext<'_>, window: &Window, cfg: &EvalConfig) -> Rollout {
    window
        .targets
        .iter()
        .map(|&t| {
            (cfg.obs_len..cfg.seq_len)
                .map(|k| window.position(ctx.scene, t, k).expect("targets span the window"))
                .collect()
        })
        .collect()
}

/// Returns the truth.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, ctx: &SceneContext<'_>, window: &Window, cfg: &EvalConfig) -> Result<Vec<Rollout>, EvalError> {
        Ok(vec![truth_of(ctx, window, cfg)])
    }
}

/// Repeats the last observed position.
pub struct PersistencePredictor;

impl Predictor for PersistencePredictor {
    fn predict(&self, ctx: &SceneContext<'_>, window: &Window, cfg: &EvalConfig) -> Result<Vec<Rollout>, EvalError> {
        Ok(vec![window
            .targets
            .iter()
            .map(|&t| {
                let last = window.position(ctx.scene, t, cfg.obs_len - 1).expect("targets span the window");
                vec![last; cfg.seq_len - cfg.obs_len]
            })
            .collect()])
    }
}

/// Autoregressive rollouts of a trained model.
pub struct ModelPredictor {
    pub params: ModelParams,
}

impl Predictor for ModelPredictor {
    fn predict(&self, ctx: &SceneContext<'_>, window: &Window, cfg: &EvalConfig) -> Result<Vec<Rollout>, EvalError> {
        let (mode, runs) = match cfg.samples {
            0 => (RolloutMode::Mean, 1),
            k => (RolloutMode::Sample, k),
        };
        let opts = ForwardOptions {
            obs_len: cfg.obs_len,
            seq_len: cfg.seq_len,
            ..ForwardOptions::rollout(mode)
        };
        // one stream per window keeps results independent of window order
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(window.start as u64);
        (0..runs)
            .map(|_| {
                let mut tape = Tape::inference();
                let bound = BoundParams::bind(&mut tape, &self.params);
                Ok(forward_window(&mut tape, &bound, ctx, window, &opts, &mut rng)?.predictions)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    /// Window start as a frame index into the scene.
    pub start: usize,
    pub targets: Vec<usize>,
    pub ade: f64,
    pub fde: f64,
    /// First rollout, kept for plotting.
    pub predicted: Rollout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub scene: String,
    pub variant: String,
    pub ade: f64,
    pub fde: f64,
    /// Scored target trajectories, summed over windows.
    pub n_peds: usize,
    pub n_windows: usize,
    #[serde(skip)]
    pub per_window: Vec<WindowMetrics>,
}

/// Scores one window. Sampled rollouts are averaged.
pub fn score_window(ctx: &SceneContext<'_>, window: &Window, predictor: &dyn Predictor, cfg: &EvalConfig) -> Result<WindowMetrics, EvalError> {
    let truth = truth_of(ctx, window, cfg);
    let rollouts = predictor.predict(ctx, window, cfg)?;
    if rollouts.is_empty() {
        return Err(EvalError::Empty);
    }
    let k = rollouts.len() as f64;
    let (mut a, mut f) = (0.0, 0.0);
    for r in &rollouts {
        a += ade_with(r, &truth, cfg.ade_denominator, cfg.obs_len)? / k;
        f += fde(r, &truth)? / k;
    }
    Ok(WindowMetrics {
        start: window.start,
        targets: window.targets.clone(),
        ade: a,
        fde: f,
        predicted: rollouts.into_iter().next().unwrap_or_default(),
    })
}

/// Scene metrics from per-window scores, weighting every target trajectory
/// equally.
pub fn aggregate(scene: &str, variant: &str, per_window: Vec<WindowMetrics>) -> Result<EvalResult, EvalError> {
    let (mut ade_sum, mut fde_sum, mut n_peds) = (0.0, 0.0, 0usize);
    for w in &per_window {
        let n = w.targets.len();
        ade_sum += w.ade * n as f64;
        fde_sum += w.fde * n as f64;
        n_peds += n;
    }
    if n_peds == 0 {
        return Err(EvalError::Empty);
    }
    Ok(EvalResult {
        scene: scene.to_string(),
        variant: variant.to_string(),
        ade: ade_sum / n_peds as f64,
        fde: fde_sum / n_peds as f64,
        n_peds,
        n_windows: per_window.len(),
        per_window,
    })
}

/// Scores `predictor` on every window of one scene.
pub fn evaluate(
    ctx: &SceneContext<'_>,
    windows: &[Window],
    predictor: &dyn Predictor,
    cfg: &EvalConfig,
    variant: &str,
) -> Result<EvalResult, EvalError> {
    let per_window = windows
        .iter()
        .map(|w| score_window(ctx, w, predictor, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    aggregate(ctx.scene.name(), variant, per_window)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_windows, Scene, TrackPoint};
    use crate::model::{ModelConfig, Variant};
    use proptest::prelude::*;
    use rand::Rng;

    fn flat_ade(pred: &[Vec<[f64; 2]>], truth: &[Vec<[f64; 2]>]) -> f64 {
        let mut s = 0.0;
        let mut n = 0;
        for i in 0..pred.len() {
            for t in 0..pred[i].len() {
                let dx = pred[i][t][0] - truth[i][t][0];
                let dy = pred[i][t][1] - truth[i][t][1];
                s += (dx * dx + dy * dy).sqrt();
                n += 1;
            }
        }
        s / n as f64
    }

    fn random_case(rng: &mut ChaCha8Rng, peds: usize, len: usize) -> (Rollout, Rollout) {
        let mut gen = || -> Rollout {
            (0..peds)
                .map(|_| (0..len).map(|_| [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)]).collect())
                .collect()
        };
        (gen(), gen())
    }

    #[test]
    fn identical_predictions_score_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (p, _) = random_case(&mut rng, 3, 12);
        assert_eq!(ade(&p, &p).unwrap(), 0.0);
        assert_eq!(fde(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn three_four_five_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (t, _) = random_case(&mut rng, 2, 12);
        let p: Rollout = t.iter().map(|tr| tr.iter().map(|q| [q[0] + 3.0, q[1] + 4.0]).collect()).collect();
        assert_eq!(ade(&p, &t).unwrap(), 5.0);
        assert_eq!(fde(&p, &t).unwrap(), 5.0);
    }

    #[test]
    fn random_two_pedestrian_cases_match_flat_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (p, t) = random_case(&mut rng, 2, 12);
            assert!((ade(&p, &t).unwrap() - flat_ade(&p, &t)).abs() < 1e-12);
        }
    }

    #[test]
    fn final_offset_only() {
        let t = vec![vec![[0.0, 0.0]; 12]];
        let mut p = t.clone();
        p[0][11] = [0.0, 2.0];
        assert_eq!(fde(&p, &t).unwrap(), 2.0);
        assert!((ade(&p, &t).unwrap() - 2.0 / 12.0).abs() < 1e-15);
        assert!((ade_with(&p, &t, AdeDenominator::Window, 8).unwrap() - 2.0 / 20.0).abs() < 1e-15);
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        assert!(matches!(ade(&[], &[]), Err(EvalError::Empty)));
        assert!(matches!(fde(&[vec![]], &[vec![]]), Err(EvalError::Empty)));
        let a = vec![vec![[0.0, 0.0]; 3]];
        let b = vec![vec![[0.0, 0.0]; 2]];
        assert!(matches!(ade(&a, &b), Err(EvalError::Mismatch(_))));
    }

    proptest! {
        #[test]
        fn single_step_fde_equals_ade(pts in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 1..6)) {
            let p: Rollout = pts.iter().map(|q| vec![[q.0, q.1]]).collect();
            let t: Rollout = pts.iter().map(|q| vec![[q.2, q.3]]).collect();
            let f = fde(&p, &t).unwrap();
            prop_assert!(f >= 0.0);
            prop_assert!((f - ade(&p, &t).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn rigid_motions_leave_metrics_unchanged(seed in 0u64..1000, angle in -3.2f64..3.2, dx in -50.0f64..50.0, dy in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, t) = random_case(&mut rng, 3, 12);
            let (s, c) = angle.sin_cos();
            let mv = |r: &Rollout| -> Rollout {
                r.iter().map(|tr| tr.iter().map(|q| [c * q[0] - s * q[1] + dx, s * q[0] + c * q[1] + dy]).collect()).collect()
            };
            prop_assert!((ade(&mv(&p), &mv(&t)).unwrap() - ade(&p, &t).unwrap()).abs() < 1e-9);
            prop_assert!((fde(&mv(&p), &mv(&t)).unwrap() - fde(&p, &t).unwrap()).abs() < 1e-9);
            let max_step = p.iter().zip(&t).flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| dist(*x, *y))).fold(0.0, f64::max);
            prop_assert!(ade(&p, &t).unwrap() <= max_step);
        }
    }

    fn constant_velocity_scene(v: f64) -> Scene {
        let pts: Vec<TrackPoint> = (0..3i64)
            .flat_map(|ped| {
                (0..30i64).map(move |f| TrackPoint {
                    frame: f * 10,
                    ped,
                    x: v * 0.4 * f as f64,
                    y: 2.0 * ped as f64,
                })
            })
            .collect();
        Scene::from_points("cv", &pts, 0.4).unwrap()
    }

    #[test]
    fn oracle_and_persistence_baselines() {
        let v = 1.3;
        let scene = constant_velocity_scene(v);
        let ctx = SceneContext::new(&scene);
        let windows = make_windows(&scene, 1);
        let cfg = EvalConfig::default();
        let r = evaluate(&ctx, &windows, &OraclePredictor, &cfg, "oracle").unwrap();
        assert_eq!((r.ade, r.fde), (0.0, 0.0));
        assert_eq!(r.n_windows, 11);
        assert_eq!(r.n_peds, 33);
        let r = evaluate(&ctx, &windows, &PersistencePredictor, &cfg, "persistence").unwrap();
        assert!((r.fde - 12.0 * v * 0.4).abs() < 1e-12, "{}", r.fde);
        // mean of 1..=12 steps
        assert!((r.ade - 6.5 * v * 0.4).abs() < 1e-12, "{}", r.ade);
    }

    #[test]
    fn model_rollouts_repeat_exactly() {
        let scene = constant_velocity_scene(1.0);
        let ctx = SceneContext::new(&scene);
        let windows = make_windows(&scene, 3);
        let cfg_model = ModelConfig {
            hidden: 8,
            embed: 4,
            ..ModelConfig::with_variant(Variant::S)
        };
        let predictor = ModelPredictor {
            params: ModelParams::init(cfg_model, 0),
        };
        let cfg = EvalConfig::default();
        let a = evaluate(&ctx, &windows, &predictor, &cfg, "s").unwrap();
        let b = evaluate(&ctx, &windows, &predictor, &cfg, "s").unwrap();
        assert_eq!(a, b);
        let sampled = EvalConfig { samples: 3, ..cfg };
        let c = evaluate(&ctx, &windows, &predictor, &sampled, "s").unwrap();
        assert_eq!(c, evaluate(&ctx, &windows, &predictor, &sampled, "s").unwrap());
        assert_ne!(a.ade, c.ade);
        // a window's rollout does not depend on which windows precede it
        let last = evaluate(&ctx, &windows[windows.len() - 1..], &predictor, &sampled, "s").unwrap();
        assert_eq!(last.per_window[0], c.per_window[windows.len() - 1]);
    }
}
