//! RMSprop training over teacher-forced windows.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::dataset::{Window, OBS_LEN, SEQ_LEN};
use crate::model::{
    forward_window, write_checkpoint, BoundParams, Checkpoint, ForwardOptions, ModelError, ModelParams, SceneContext,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub eps: f64,
    pub epochs: usize,
    /// Cap on the global gradient L2 norm; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Windows per gradient step.
    pub batch: usize,
    pub loss_mean: bool,
    pub predict_partial: bool,
    /// Stop after this many gradient steps, whatever the epoch count.
    pub max_steps: Option<usize>,
    /// Abort an epoch in which more than this fraction of windows fail.
    pub max_skip_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.003,
            decay: 0.95,
            eps: 1e-8,
            epochs: 50,
            grad_clip: Some(10.0),
            seed: 0,
            batch: 1,
            loss_mean: false,
            predict_partial: false,
            max_steps: None,
            max_skip_fraction: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return bad("decay must lie in (0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("gradient clip must be positive");
            }
        }
        Ok(())
    }

    fn forward_options(&self) -> ForwardOptions {
        ForwardOptions {
            teacher_forcing: true,
            predict_partial: self.predict_partial,
            loss_mean: self.loss_mean,
            obs_len: OBS_LEN,
            seq_len: SEQ_LEN,
            ..ForwardOptions::default()
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite gradient in {param}")]
    NonFiniteGradient { param: String },
    #[error("epoch {epoch}: {skipped} of {total} windows produced non-finite values")]
    TooManySkipped { epoch: usize, skipped: usize, total: usize },
    #[error("no training windows")]
    NoWindows,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Running mean-square accumulators, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub acc: Vec<Tensor>,
}

impl OptState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            acc: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }
}

/// Rescales all gradients so their global norm is at most `cap`. Returns
/// the norm before clipping.
pub fn clip_gradients(params: &mut ModelParams, cap: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > cap {
        let k = cap / norm;
        for t in params.tensors_mut() {
            if t.grad().is_some() {
                t.grad_mut().iter_mut().for_each(|g| *g *= k);
            }
        }
    }
    norm
}

/// `v ← decay·v + (1−decay)·g²; θ ← θ − lr·g/(√v + eps)`, then clears the
/// gradients. Nothing changes if any gradient is non-finite.
pub fn rmsprop_step(params: &mut ModelParams, opt: &mut OptState, lr: f64, decay: f64, eps: f64) -> Result<(), TrainError> {
    for (name, t) in params.named() {
        if t.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(TrainError::NonFiniteGradient { param: name.to_string() });
        }
    }
    for (t, v) in params.tensors_mut().iter_mut().zip(&mut opt.acc) {
        let g = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
        for ((w, a), g) in t.data_mut().iter_mut().zip(v.data_mut()).zip(g) {
            *a = decay * *a + (1.0 - decay) * g * g;
            *w -= lr * g / (a.sqrt() + eps);
        }
        t.zero_grad();
    }
    Ok(())
}

/// One training scene and the windows drawn from it.
pub struct TrainScene<'a> {
    pub ctx: SceneContext<'a>,
    pub windows: Vec<Window>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    /// Mean window loss of the step.
    pub loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// Windows skipped so far in this epoch.
    pub skipped: usize,
}

pub const LOG_HEADER: &str = "epoch,step,loss,grad_norm,skipped";

impl LogRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{},{}", self.epoch, self.step, self.loss, self.grad_norm, self.skipped)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
    pub windows: usize,
    pub skipped: usize,
}

fn skippable(e: &ModelError) -> bool {
    matches!(
        e,
        ModelError::NonFiniteLoss { .. }
            | ModelError::Autodiff(AutodiffError::NonFinite { .. } | AutodiffError::Domain { .. })
    )
}

/// Mean teacher-forced loss per window, without touching gradients.
pub fn mean_window_loss(params: &ModelParams, data: &[TrainScene], opts: &ForwardOptions) -> Result<f64, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut total, mut n) = (0.0, 0usize);
    for s in data {
        for w in &s.windows {
            let mut tape = Tape::inference();
            let bound = BoundParams::bind(&mut tape, params);
            total += forward_window(&mut tape, &bound, &s.ctx, w, opts, &mut rng)?.loss_value;
            n += 1;
        }
    }
    Ok(if n == 0 { f64::NAN } else { total / n as f64 })
}

pub struct Trainer {
    pub params: ModelParams,
    pub opt: OptState,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed gradient steps.
    pub step: usize,
}

impl Trainer {
    pub fn new(params: ModelParams, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        Ok(Self {
            opt: OptState::new(&params),
            params,
            config,
            epoch: 0,
            step: 0,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: Checkpoint, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let opt = match ckpt.opt {
            Some(acc) => OptState { acc },
            None => OptState::new(&ckpt.params),
        };
        let step = ckpt.knobs.get("step").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        Ok(Self {
            params: ckpt.params,
            opt,
            config,
            epoch: ckpt.epoch,
            step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            epoch: self.epoch,
            knobs: serde_json::json!({ "train": self.config, "step": self.step }),
            opt: Some(self.opt.acc.clone()),
        }
    }

    fn finished(&self) -> bool {
        self.epoch >= self.config.epochs || self.config.max_steps.is_some_and(|m| self.step >= m)
    }

    /// Window order for `epoch`; depends only on the seed and the epoch, so
    /// a resumed run sees the same order.
    fn epoch_order(&self, data: &[TrainScene], epoch: usize) -> (Vec<(usize, usize)>, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<(usize, usize)> = data
            .iter()
            .enumerate()
            .flat_map(|(s, d)| (0..d.windows.len()).map(move |w| (s, w)))
            .collect();
        order.shuffle(&mut rng);
        (order, rng)
    }

    /// One pass over all windows. Windows whose forward pass goes
    /// non-finite are skipped and counted.
    pub fn run_epoch(&mut self, data: &[TrainScene], log: &mut dyn FnMut(&LogRow)) -> Result<EpochSummary, TrainError> {
        let (order, mut rng) = self.epoch_order(data, self.epoch);
        if order.is_empty() {
            return Err(TrainError::NoWindows);
        }
        let opts = self.config.forward_options();
        let (mut skipped, mut loss_sum, mut used, mut steps) = (0usize, 0.0, 0usize, 0usize);
        let limit = |step: usize| self.config.max_steps.is_some_and(|m| step >= m);
        for batch in order.chunks(self.config.batch) {
            if limit(self.step) {
                break;
            }
            let (mut batch_loss, mut batch_used) = (0.0, 0usize);
            for &(s, w) in batch {
                let scene = &data[s];
                let mut tape = Tape::new();
                let bound = BoundParams::bind(&mut tape, &self.params);
                let out = match forward_window(&mut tape, &bound, &scene.ctx, &scene.windows[w], &opts, &mut rng) {
                    Ok(out) => out,
                    Err(e) if skippable(&e) => {
                        log::warn!("skipping window at frame {} of {}: {e}", scene.windows[w].start, scene.ctx.scene.name());
                        skipped += 1;
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                };
                let loss = tape.scale(out.loss, 1.0 / batch.len() as f64).map_err(ModelError::from)?;
                let grads = tape.backward(loss).map_err(ModelError::from)?;
                bound.accumulate(&grads, &mut self.params)?;
                batch_loss += out.loss_value;
                batch_used += 1;
            }
            if batch_used == 0 {
                continue;
            }
            let grad_norm = match self.config.grad_clip {
                Some(cap) => clip_gradients(&mut self.params, cap),
                None => self.params.grad_norm(),
            };
            let c = &self.config;
            if let Err(e) = rmsprop_step(&mut self.params, &mut self.opt, c.learning_rate, c.decay, c.eps) {
                log::warn!("skipping step {}: {e}", self.step);
                self.params.zero_grad();
                skipped += batch_used;
                continue;
            }
            self.step += 1;
            steps += 1;
            used += batch_used;
            loss_sum += batch_loss;
            log(&LogRow {
                epoch: self.epoch,
                step: self.step,
                loss: batch_loss / batch_used as f64,
                grad_norm,
                skipped,
            });
        }
        if skipped as f64 > self.config.max_skip_fraction * order.len() as f64 {
            return Err(TrainError::TooManySkipped {
                epoch: self.epoch,
                skipped,
                total: order.len(),
            });
        }
        let summary = EpochSummary {
            epoch: self.epoch,
            mean_loss: if used == 0 { f64::NAN } else { loss_sum / used as f64 },
            steps,
            windows: used,
            skipped,
        };
        self.epoch += 1;
        Ok(summary)
    }

    /// Runs the remaining epochs. With `out_dir`, appends to `train_log.csv`
    /// and `epochs.csv`, rewrites `last.ckpt` after every epoch and writes
    /// `model.ckpt` at the end.
    pub fn fit(&mut self, data: &[TrainScene], out_dir: Option<&Path>) -> Result<Vec<EpochSummary>, TrainError> {
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| TrainError::Io { path: path.clone(), source }
        };
        let open_log = |name: &str, header: &str| -> Result<Option<(PathBuf, std::fs::File)>, TrainError> {
            let Some(dir) = out_dir else { return Ok(None) };
            let path = dir.join(name);
            let fresh = !path.exists();
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(io(&path))?;
            if fresh {
                writeln!(f, "{header}").map_err(io(&path))?;
            }
            Ok(Some((path, f)))
        };
        let mut step_log = open_log("train_log.csv", LOG_HEADER)?;
        let mut epoch_log = open_log("epochs.csv", "epoch,mean_loss,steps,windows,skipped")?;
        let mut summaries = Vec::new();
        while !self.finished() {
            let mut write_err = None;
            let summary = self.run_epoch(data, &mut |row| {
                if let Some((path, f)) = &mut step_log {
                    if let Err(e) = writeln!(f, "{}", row.csv()) {
                        write_err.get_or_insert((path.clone(), e));
                    }
                }
            })?;
            if let Some((path, e)) = write_err {
                return Err(io(&path)(e));
            }
            log::info!(
                "epoch {} mean loss {:.4} over {} windows ({} skipped)",
                summary.epoch,
                summary.mean_loss,
                summary.windows,
                summary.skipped
            );
            if let Some((path, f)) = &mut epoch_log {
                let s = &summary;
                writeln!(f, "{},{},{},{},{}", s.epoch, s.mean_loss, s.steps, s.windows, s.skipped).map_err(io(path))?;
            }
            if let Some(dir) = out_dir {
                write_checkpoint(&dir.join("last.ckpt"), &self.checkpoint())?;
            }
            summaries.push(summary);
        }
        if let Some(dir) = out_dir {
            write_checkpoint(&dir.join("model.ckpt"), &self.checkpoint())?;
        }
        Ok(summaries)
    }
}
