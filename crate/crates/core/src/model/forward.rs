use rand::Rng;

use super::{GaussianParams, ModelConfig, ModelError, ModelParams, ParamIds, RolloutMode, SigmaSquash};
use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::dataset::{Scene, Window, OBS_LEN, SEQ_LEN};
use crate::maps::{CellHistograms, NavigationMap};
use crate::pooling::{navigation_tensor, semantic_tensor, social_cells};

/// Model parameters registered as leaves of one tape.
pub struct BoundParams {
    vars: Vec<Var>,
    ids: ParamIds,
    config: ModelConfig,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &ModelParams) -> Self {
        Self {
            vars: params.tensors().iter().map(|t| tape.param(t)).collect(),
            ids: params.ids().clone(),
            config: params.config().clone(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn var(&self, k: usize) -> Var {
        self.vars[k]
    }

    fn opt(&self, k: Option<usize>) -> Option<Var> {
        k.map(|k| self.vars[k])
    }

    /// Adds the gradients of every bound parameter into `params`.
    pub fn accumulate(&self, grads: &Gradients, params: &mut ModelParams) -> Result<(), ModelError> {
        for (t, &v) in params.tensors_mut().iter_mut().zip(&self.vars) {
            if let Some(g) = grads.get(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(tape: &mut Tape, dim: usize) -> Self {
        Self {
            h: tape.constant(Tensor::column(vec![0.0; dim])),
            c: tape.constant(Tensor::column(vec![0.0; dim])),
        }
    }
}

fn affine(tape: &mut Tape, w: Var, x: Var, b: Option<Var>) -> Result<Var, ModelError> {
    let y = tape.matmul(w, x)?;
    Ok(match b {
        Some(b) => tape.add(y, b)?,
        None => y,
    })
}

pub fn lstm_step(tape: &mut Tape, params: &BoundParams, state: LstmState, input: Var) -> Result<LstmState, ModelError> {
    let mut pre = [state.h; 4];
    for (k, g) in params.ids.gates.iter().enumerate() {
        let wx = tape.matmul(params.var(g.w), input)?;
        let uh = tape.matmul(params.var(g.u), state.h)?;
        let s = tape.add(wx, uh)?;
        pre[k] = tape.add(s, params.var(g.b))?;
    }
    let f = tape.sigmoid(pre[0])?;
    let i = tape.sigmoid(pre[1])?;
    let o = tape.sigmoid(pre[2])?;
    let cand = tape.tanh(pre[3])?;
    let keep = tape.mul(f, state.c)?;
    let write = tape.mul(i, cand)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok(LstmState { h, c })
}

/// Pooled context for one pedestrian at one step. Each field must be
/// present exactly when the variant uses that mechanism.
#[derive(Clone, Debug, Default)]
pub struct PoolingInputs {
    /// `(cell, neighbour hidden state)` pairs; several may share a cell.
    pub social: Option<Vec<(usize, Var)>>,
    pub navigation: Option<Vec<f64>>,
    pub semantic: Option<Vec<f64>>,
}

fn check_presence(variant: super::Variant, wanted: bool, got: bool, what: &'static str) -> Result<(), ModelError> {
    match (wanted, got) {
        (true, false) => Err(ModelError::VariantMismatch {
            variant,
            problem: match what {
                "social" => "needs a social tensor",
                "navigation" => "needs a navigation tensor",
                _ => "needs a semantic tensor",
            },
        }),
        (false, true) => Err(ModelError::VariantMismatch {
            variant,
            problem: match what {
                "social" => "does not take a social tensor",
                "navigation" => "does not take a navigation tensor",
                _ => "does not take a semantic tensor",
            },
        }),
        _ => Ok(()),
    }
}

/// LSTM input for one pedestrian: `e` for the vanilla model, otherwise
/// `concat(e, g)` with `g` embedding the pooled tensors.
pub fn embed_inputs(tape: &mut Tape, params: &BoundParams, position: [f64; 2], pooling: &PoolingInputs) -> Result<Var, ModelError> {
    let cfg = &params.config;
    let v = cfg.variant;
    check_presence(v, v.social(), pooling.social.is_some(), "social")?;
    check_presence(v, v.navigation(), pooling.navigation.is_some(), "navigation")?;
    check_presence(v, v.semantic(), pooling.semantic.is_some(), "semantic")?;
    let ids = &params.ids;

    let pos = tape.constant(Tensor::column(position.to_vec()));
    let e = affine(tape, params.var(ids.w_e), pos, params.opt(ids.b_e))?;
    let e = tape.relu(e)?;
    let Some(terms) = &pooling.social else {
        return Ok(e);
    };

    let w_a = params.opt(ids.w_a).expect("social weights exist for social variants");
    let a = tape.block_matvec(w_a, cfg.hidden, terms)?;
    let a = match params.opt(ids.b_a) {
        Some(b) => tape.add(a, b)?,
        None => a,
    };
    let mut parts = vec![tape.relu(a)?];
    for (tensor, w, b) in [
        (&pooling.navigation, ids.w_n, ids.b_n),
        (&pooling.semantic, ids.w_s, ids.b_s),
    ] {
        if let (Some(t), Some(w)) = (tensor, w) {
            let x = tape.constant(Tensor::column(t.clone()));
            let y = affine(tape, params.var(w), x, params.opt(b))?;
            parts.push(tape.relu(y)?);
        }
    }
    let cat = tape.concat(&parts, 0)?;
    let g = affine(tape, params.var(ids.w_g.expect("social variants have w_g")), cat, params.opt(ids.b_g))?;
    let g = tape.relu(g)?;
    Ok(tape.concat(&[e, g], 0)?)
}

/// Largest correlation magnitude the head can emit.
pub const RHO_LIMIT: f64 = 1.0 - 1e-6;

/// `[μx, μy, σx, σy, ρ]` as a `[5, 1]` column read from a hidden state.
pub fn output_head(tape: &mut Tape, params: &BoundParams, h: Var) -> Result<Var, ModelError> {
    let r = affine(tape, params.var(params.ids.w_l), h, params.opt(params.ids.b_l))?;
    let mu = tape.slice(r, 0, 2)?;
    let raw_sigma = tape.slice(r, 2, 2)?;
    let sigma = match params.config.sigma {
        SigmaSquash::Exp => tape.exp(raw_sigma)?,
        SigmaSquash::Softplus => tape.softplus(raw_sigma)?,
    };
    let raw_rho = tape.slice(r, 4, 1)?;
    let rho = tape.tanh(raw_rho)?;
    // tanh rounds to ±1 beyond |x| ≈ 19, which would make the covariance
    // singular
    let rho = tape.scale(rho, RHO_LIMIT)?;
    Ok(tape.concat(&[mu, sigma, rho], 0)?)
}

/// A scene and the maps its pooling reads. Maps are in world coordinates
/// and must already be scaled.
#[derive(Clone, Copy, Debug)]
pub struct SceneContext<'a> {
    pub scene: &'a Scene,
    pub nav: Option<&'a NavigationMap>,
    pub sem: Option<&'a CellHistograms>,
}

impl<'a> SceneContext<'a> {
    pub fn new(scene: &'a Scene) -> Self {
        Self {
            scene,
            nav: None,
            sem: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    /// Feed ground truth for the predicted frames instead of the model's own
    /// output.
    pub teacher_forcing: bool,
    pub mode: RolloutMode,
    /// Also score context pedestrians on the predicted frames they are
    /// visible in.
    pub predict_partial: bool,
    /// Divide the summed loss by the number of terms.
    pub loss_mean: bool,
    pub obs_len: usize,
    pub seq_len: usize,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            teacher_forcing: true,
            mode: RolloutMode::Mean,
            predict_partial: false,
            loss_mean: false,
            obs_len: OBS_LEN,
            seq_len: SEQ_LEN,
        }
    }
}

impl ForwardOptions {
    pub fn rollout(mode: RolloutMode) -> Self {
        Self {
            teacher_forcing: false,
            mode,
            ..Self::default()
        }
    }
}

#[derive(Debug)]
pub struct WindowOutput {
    /// Scalar loss node.
    pub loss: Var,
    pub loss_value: f64,
    pub n_terms: usize,
    /// Target track indices, in window order.
    pub targets: Vec<usize>,
    /// Per target, the positions emitted for every predicted frame: the
    /// rollout positions, or the one-step means under teacher forcing.
    pub predictions: Vec<Vec<[f64; 2]>>,
    /// Per target, the distribution for every predicted frame.
    pub gaussians: Vec<Vec<GaussianParams>>,
}

/// Mean observed position of the window's targets. Positions enter the
/// embedding relative to this point.
pub fn window_offset(scene: &Scene, window: &Window, obs_len: usize) -> [f64; 2] {
    let mut s = [0.0, 0.0];
    let mut n = 0.0;
    for &t in &window.targets {
        for k in 0..obs_len {
            if let Some(p) = window.position(scene, t, k) {
                s[0] += p[0];
                s[1] += p[1];
                n += 1.0;
            }
        }
    }
    if n == 0.0 {
        return s;
    }
    [s[0] / n, s[1] / n]
}

/// Runs every pedestrian of `window` through the model.
///
/// Step `k` processes frame `k` and emits the distribution of frame `k + 1`
/// for every target, so frames `obs_len..seq_len` are predicted. Pooling at
/// step `k` reads positions at `k` and hidden states from step `k − 1`; a
/// pedestrian's state starts at zero on its first visible frame. Context
/// pedestrians always use ground truth while visible.
pub fn forward_window<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &BoundParams,
    ctx: &SceneContext<'_>,
    window: &Window,
    opts: &ForwardOptions,
    rng: &mut R,
) -> Result<WindowOutput, ModelError> {
    let cfg = &params.config;
    let variant = cfg.variant;
    if window.targets.is_empty() {
        return Err(ModelError::NoTargets);
    }
    if variant.navigation() && ctx.nav.is_none() {
        return Err(ModelError::MissingMap(variant, "navigation"));
    }
    if variant.semantic() && ctx.sem.is_none() {
        return Err(ModelError::MissingMap(variant, "semantic"));
    }
    let scene = ctx.scene;
    let (obs_len, seq_len) = (opts.obs_len, opts.seq_len);
    let offset = window_offset(scene, window, obs_len);
    let tracks: Vec<usize> = window.all_tracks().collect();
    let n_targets = window.targets.len();
    let grid = cfg.social_grid();
    let zero = LstmState::zeros(tape, cfg.hidden);

    let mut states: Vec<Option<LstmState>> = vec![None; tracks.len()];
    let mut rolled: Vec<Option<[f64; 2]>> = vec![None; n_targets];
    let mut predictions = vec![Vec::with_capacity(seq_len - obs_len); n_targets];
    let mut gaussians = vec![Vec::with_capacity(seq_len - obs_len); n_targets];
    let mut terms = Vec::new();

    for k in 0..seq_len.saturating_sub(1) {
        let mut present = Vec::new();
        let mut positions = Vec::new();
        for (local, &t) in tracks.iter().enumerate() {
            let p = if local < n_targets && !opts.teacher_forcing && k >= obs_len {
                rolled[local]
            } else {
                window.position(scene, t, k)
            };
            if let Some(p) = p {
                present.push(local);
                positions.push(p);
            }
        }

        let mut updates = Vec::with_capacity(present.len());
        for (slot, &local) in present.iter().enumerate() {
            let p = positions[slot];
            let pooling = PoolingInputs {
                social: variant.social().then(|| {
                    social_cells(slot, &positions, &grid)
                        .into_iter()
                        .filter_map(|(cell, j)| states[present[j]].map(|s| (cell, s.h)))
                        .collect()
                }),
                navigation: ctx.nav.filter(|_| variant.navigation()).map(|m| navigation_tensor(p, m, cfg.nav_size)),
                semantic: ctx.sem.filter(|_| variant.semantic()).map(|m| semantic_tensor(p, m, cfg.sem_size)),
            };
            let input = embed_inputs(tape, params, [p[0] - offset[0], p[1] - offset[1]], &pooling)?;
            let next = lstm_step(tape, params, states[local].unwrap_or(zero), input)?;
            updates.push((local, next));

            let is_target = local < n_targets;
            let frame = k + 1;
            if frame < obs_len {
                continue;
            }
            let truth = window.position(scene, tracks[local], frame);
            if !is_target && !(opts.predict_partial && truth.is_some()) {
                continue;
            }
            let ped = scene.tracks()[tracks[local]].ped;
            let frame_id = scene.frames()[window.start + frame];
            let wrap = |source| ModelError::NonFiniteLoss {
                ped,
                frame: frame_id,
                source,
            };
            let head = output_head(tape, params, next.h).map_err(|e| match e {
                ModelError::Autodiff(source) => wrap(source),
                other => other,
            })?;
            if let Some(truth) = truth {
                let nll = tape.bivariate_nll(head, [truth[0] - offset[0], truth[1] - offset[1]]).map_err(wrap)?;
                terms.push(nll);
            }
            if is_target {
                let g = GaussianParams::from_slice(tape.value(head).data()).map_err(wrap)?.translated(offset);
                let next_pos = if opts.teacher_forcing {
                    g.mu
                } else {
                    super::sample_position(&g, rng, opts.mode)
                };
                rolled[local] = Some(next_pos);
                predictions[local].push(next_pos);
                gaussians[local].push(g);
            }
        }
        for (local, s) in updates {
            states[local] = Some(s);
        }
    }

    let n_terms = terms.len();
    let loss = if terms.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let stacked = tape.concat(&terms, 0)?;
        let total = tape.sum(stacked)?;
        if opts.loss_mean {
            tape.scale(total, 1.0 / n_terms as f64)?
        } else {
            total
        }
    };
    Ok(WindowOutput {
        loss,
        loss_value: tape.value(loss).data()[0],
        n_terms,
        targets: window.targets.clone(),
        predictions,
        gaussians,
    })
}
