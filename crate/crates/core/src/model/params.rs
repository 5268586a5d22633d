use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError};
use crate::autodiff::Tensor;
use crate::maps::NUM_CLASSES;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateIds {
    pub w: usize,
    pub u: usize,
    pub b: usize,
}

/// Positions of each role in [`ModelParams::tensors`]. Mechanisms absent
/// from the variant have no entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamIds {
    pub w_e: usize,
    pub b_e: Option<usize>,
    pub w_a: Option<usize>,
    pub b_a: Option<usize>,
    pub w_n: Option<usize>,
    pub b_n: Option<usize>,
    pub w_s: Option<usize>,
    pub b_s: Option<usize>,
    pub w_g: Option<usize>,
    pub b_g: Option<usize>,
    /// Forget, input, output and candidate gates, in that order.
    pub gates: [GateIds; 4],
    pub w_l: usize,
    pub b_l: Option<usize>,
}

pub(super) const GATE_NAMES: [&str; 4] = ["f", "i", "o", "c"];

/// Every trainable tensor of one model, with stable names.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    ids: ParamIds,
}

struct Layout {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

impl Layout {
    fn push(&mut self, name: &str, shape: &[usize]) -> usize {
        self.names.push(name.to_string());
        self.shapes.push(shape.to_vec());
        self.names.len() - 1
    }
}

fn layout(cfg: &ModelConfig) -> (Layout, ParamIds) {
    let mut l = Layout {
        names: Vec::new(),
        shapes: Vec::new(),
    };
    let (e, d) = (cfg.embed, cfg.hidden);
    let v = cfg.variant;
    let bias = |l: &mut Layout, name: &str, n: usize, on: bool| on.then(|| l.push(name, &[n, 1]));

    let w_e = l.push("w_e", &[e, 2]);
    let b_e = bias(&mut l, "b_e", e, cfg.biases);
    let w_a = v.social().then(|| l.push("w_a", &[e, cfg.social_size * cfg.social_size * d]));
    let b_a = bias(&mut l, "b_a", e, cfg.biases && v.social());
    let w_n = v.navigation().then(|| l.push("w_n", &[e, cfg.nav_size * cfg.nav_size]));
    let b_n = bias(&mut l, "b_n", e, cfg.biases && v.navigation());
    let w_s = v.semantic().then(|| l.push("w_s", &[e, cfg.sem_size * cfg.sem_size * NUM_CLASSES]));
    let b_s = bias(&mut l, "b_s", e, cfg.biases && v.semantic());
    let pooled = [v.social(), v.navigation(), v.semantic()].iter().filter(|b| **b).count();
    let w_g = v.social().then(|| l.push("w_g", &[e, pooled * e]));
    let b_g = bias(&mut l, "b_g", e, cfg.biases && v.social());
    let input = cfg.lstm_input();
    let gates = GATE_NAMES.map(|g| GateIds {
        w: l.push(&format!("lstm.w_{g}"), &[d, input]),
        u: l.push(&format!("lstm.u_{g}"), &[d, d]),
        b: l.push(&format!("lstm.b_{g}"), &[d, 1]),
    });
    let w_l = l.push("w_l", &[5, d]);
    let b_l = bias(&mut l, "b_l", 5, cfg.biases);
    let ids = ParamIds {
        w_e,
        b_e,
        w_a,
        b_a,
        w_n,
        b_n,
        w_s,
        b_s,
        w_g,
        b_g,
        gates,
        w_l,
        b_l,
    };
    (l, ids)
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Self {
        let (l, ids) = layout(&config);
        let tensors = l.shapes.iter().map(|s| Tensor::zeros(s)).collect();
        Self {
            config,
            names: l.names,
            tensors,
            ids,
        }
    }

    /// Weights uniform in `±1/√fan_in`, biases zero except the forget gate
    /// at `+1`.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(config);
        let forget_bias = p.ids.gates[0].b;
        for (k, t) in p.tensors.iter_mut().enumerate() {
            let is_bias = t.shape()[1] == 1 && p.names[k].contains("b_");
            if is_bias {
                if k == forget_bias {
                    t.data_mut().iter_mut().for_each(|v| *v = 1.0);
                }
                continue;
            }
            let bound = 1.0 / (t.shape()[1] as f64).sqrt();
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
        }
        p
    }

    /// Rebuilds from named tensors, checking that names and shapes match the
    /// layout `config` implies.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        let mut p = Self::zeros(config);
        if named.len() != p.names.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameter blocks, found {}",
                p.names.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let k = p
                .index(&name)
                .ok_or_else(|| ModelError::Checkpoint(format!("unexpected parameter {name:?}")))?;
            if t.shape() != p.tensors[k].shape() {
                return Err(ModelError::Checkpoint(format!(
                    "{name}: shape {:?}, expected {:?}",
                    t.shape(),
                    p.tensors[k].shape()
                )));
            }
            p.tensors[k] = t.detached();
        }
        Ok(p)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn ids(&self) -> &ParamIds {
        &self.ids
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index(name).map(|k| &self.tensors[k])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index(name).map(move |k| &mut self.tensors[k])
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Global L2 norm of all gradient buffers.
    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(|t| t.grad())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn values_equal(&self, other: &Self) -> bool {
        self.config == other.config
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}
