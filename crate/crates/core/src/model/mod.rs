//! Per-pedestrian LSTM with pooled context inputs and a bivariate Gaussian
//! output head.

mod checkpoint;
mod forward;
mod gaussian;
mod params;

use serde::{Deserialize, Serialize};

use crate::autodiff::AutodiffError;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use forward::{
    embed_inputs, forward_window, lstm_step, output_head, BoundParams, ForwardOptions, LstmState, PoolingInputs,
    SceneContext, WindowOutput,
    window_offset, RHO_LIMIT,
};
pub use gaussian::{sample_position, GaussianParams, RolloutMode};
pub use params::{ModelParams, ParamIds};

/// Which pooling mechanisms feed the LSTM.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Vanilla,
    S,
    SN,
    SS,
    SNS,
}

impl Variant {
    /// Column order of the results table.
    pub const ALL: [Variant; 5] = [Self::Vanilla, Self::S, Self::SN, Self::SS, Self::SNS];

    pub fn social(self) -> bool {
        self != Self::Vanilla
    }

    pub fn navigation(self) -> bool {
        matches!(self, Self::SN | Self::SNS)
    }

    pub fn semantic(self) -> bool {
        matches!(self, Self::SS | Self::SNS)
    }

    pub fn key(self) -> &'static str {
        match self {
            Self::Vanilla => "vanilla",
            Self::S => "s",
            Self::SN => "sn",
            Self::SS => "ss",
            Self::SNS => "sns",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Vanilla => "Vanilla LSTM",
            Self::S => "Social-LSTM",
            Self::SN => "SN-LSTM",
            Self::SS => "SS-LSTM",
            Self::SNS => "SNS-LSTM",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|v| v.key() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown variant {s:?} (vanilla, s, sn, ss, sns)"))
    }
}

/// Squashing that turns raw head outputs into standard deviations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaSquash {
    #[default]
    Exp,
    Softplus,
}

impl std::str::FromStr for SigmaSquash {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "exp" => Ok(Self::Exp),
            "softplus" => Ok(Self::Softplus),
            _ => Err(format!("unknown sigma squashing {s:?} (exp, softplus)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// LSTM hidden size.
    pub hidden: usize,
    /// Width of every embedding.
    pub embed: usize,
    pub social_size: usize,
    /// Side of one social cell, meters.
    pub social_cell: f64,
    pub nav_size: usize,
    pub sem_size: usize,
    pub sigma: SigmaSquash,
    /// Adds bias vectors to the embedding and output layers.
    pub biases: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::SNS,
            hidden: 128,
            embed: 64,
            social_size: 8,
            social_cell: 0.5,
            nav_size: 32,
            sem_size: 20,
            sigma: SigmaSquash::Exp,
            biases: false,
        }
    }
}

impl ModelConfig {
    pub fn with_variant(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    /// Width of the LSTM input: `e` alone, or `concat(e, g)`.
    pub fn lstm_input(&self) -> usize {
        if self.variant.social() {
            2 * self.embed
        } else {
            self.embed
        }
    }

    pub fn social_grid(&self) -> crate::pooling::SocialGrid {
        crate::pooling::SocialGrid {
            size: self.social_size,
            cell_size: self.social_cell,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("variant {variant} {problem}")]
    VariantMismatch { variant: Variant, problem: &'static str },
    #[error("window has no target pedestrians")]
    NoTargets,
    #[error("non-finite loss for pedestrian {ped} at frame {frame}: {source}")]
    NonFiniteLoss {
        ped: i64,
        frame: i64,
        #[source]
        source: AutodiffError,
    },
    #[error("variant {0} needs a {1} map for this scene")]
    MissingMap(Variant, &'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
