use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{bivariate_nll_value, AutodiffError};

/// A bivariate normal over the next position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mu: [f64; 2],
    pub sigma: [f64; 2],
    pub rho: f64,
}

/// How a rollout turns a predicted distribution into the next position.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RolloutMode {
    #[default]
    Mean,
    Sample,
}

impl std::str::FromStr for RolloutMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mean" => Ok(Self::Mean),
            "sample" => Ok(Self::Sample),
            _ => Err(format!("unknown rollout mode {s:?} (mean, sample)")),
        }
    }
}

impl GaussianParams {
    /// From `[μx, μy, σx, σy, ρ]`, checking `σ > 0` and `|ρ| < 1`.
    pub fn from_slice(p: &[f64]) -> Result<Self, AutodiffError> {
        if p.len() != 5 {
            return Err(AutodiffError::Shape {
                op: "gaussian",
                lhs: vec![p.len()],
                rhs: vec![5],
            });
        }
        for (index, &value) in p.iter().enumerate() {
            let ok = match index {
                0 | 1 => value.is_finite(),
                2 | 3 => value > 0.0 && value.is_finite(),
                _ => value.abs() < 1.0,
            };
            if !ok {
                return Err(AutodiffError::Domain {
                    op: "gaussian",
                    index,
                    value,
                });
            }
        }
        Ok(Self {
            mu: [p[0], p[1]],
            sigma: [p[2], p[3]],
            rho: p[4],
        })
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.mu[0], self.mu[1], self.sigma[0], self.sigma[1], self.rho]
    }

    pub fn covariance(&self) -> [[f64; 2]; 2] {
        let [sx, sy] = self.sigma;
        let c = self.rho * sx * sy;
        [[sx * sx, c], [c, sy * sy]]
    }

    /// Lower-triangular `L` with `L Lᵀ` equal to the covariance.
    pub fn cholesky(&self) -> [[f64; 2]; 2] {
        let [sx, sy] = self.sigma;
        [[sx, 0.0], [self.rho * sy, sy * (1.0 - self.rho * self.rho).sqrt()]]
    }

    pub fn nll(&self, target: [f64; 2]) -> f64 {
        bivariate_nll_value(&self.to_array(), target)
    }

    pub fn translated(&self, by: [f64; 2]) -> Self {
        Self {
            mu: [self.mu[0] + by[0], self.mu[1] + by[1]],
            ..*self
        }
    }
}

pub fn sample_position<R: Rng + ?Sized>(g: &GaussianParams, rng: &mut R, mode: RolloutMode) -> [f64; 2] {
    match mode {
        RolloutMode::Mean => g.mu,
        RolloutMode::Sample => {
            let z0: f64 = StandardNormal.sample(rng);
            let z1: f64 = StandardNormal.sample(rng);
            let l = g.cholesky();
            [g.mu[0] + l[0][0] * z0, g.mu[1] + l[1][0] * z0 + l[1][1] * z1]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn moments(g: &GaussianParams, n: usize) -> ([f64; 2], [f64; 2], f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws: Vec<[f64; 2]> = (0..n).map(|_| sample_position(g, &mut rng, RolloutMode::Sample)).collect();
        let nf = n as f64;
        let mean = [0, 1].map(|k| draws.iter().map(|d| d[k]).sum::<f64>() / nf);
        let var = [0, 1].map(|k| draws.iter().map(|d| (d[k] - mean[k]).powi(2)).sum::<f64>() / nf);
        let cov = draws.iter().map(|d| (d[0] - mean[0]) * (d[1] - mean[1])).sum::<f64>() / nf;
        let std = var.map(f64::sqrt);
        (mean, std, cov / (std[0] * std[1]))
    }

    #[test]
    fn mean_mode_returns_mu() {
        let g = GaussianParams {
            mu: [1.5, -2.0],
            sigma: [3.0, 0.1],
            rho: 0.4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_position(&g, &mut rng, RolloutMode::Mean), [1.5, -2.0]);
    }

    #[test]
    fn independent_marginals() {
        let g = GaussianParams {
            mu: [0.0, 0.0],
            sigma: [0.5, 2.0],
            rho: 0.0,
        };
        let (_, std, _) = moments(&g, 100_000);
        assert!((std[0] / 0.5 - 1.0).abs() < 0.05, "{std:?}");
        assert!((std[1] / 2.0 - 1.0).abs() < 0.05, "{std:?}");
    }

    #[test]
    fn strong_correlation() {
        let g = GaussianParams {
            mu: [1.0, 1.0],
            sigma: [1.0, 3.0],
            rho: 0.9,
        };
        let (_, _, r) = moments(&g, 100_000);
        assert!((r - 0.9).abs() < 0.02, "{r}");
    }

    #[test]
    fn cholesky_reproduces_covariance() {
        let g = GaussianParams {
            mu: [0.0, 0.0],
            sigma: [0.7, 1.3],
            rho: -0.6,
        };
        let l = g.cholesky();
        let c = g.covariance();
        for i in 0..2 {
            for j in 0..2 {
                let v = l[i][0] * l[j][0] + l[i][1] * l[j][1];
                assert!((v - c[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_invalid() {
        assert!(GaussianParams::from_slice(&[0.0, 0.0, 0.0, 1.0, 0.0]).is_err());
        assert!(GaussianParams::from_slice(&[0.0, 0.0, 1.0, 1.0, 1.0]).is_err());
        assert!(GaussianParams::from_slice(&[0.0, 0.0, 1.0, 1.0, 0.99]).is_ok());
    }
}
