use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};

/// Forward-process coefficients, indexed by step `t ∈ 1..=T`.
///
/// `alpha[t]` is the per-step retention `1 - beta[t]`, `alpha_bar[t]` the
/// cumulative product, and the reverse-step variance is `beta[t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear `beta` from `beta_start` to `beta_end` over `steps`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(CoreError::Config(
                "diffusion needs at least one step".into(),
            ));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_alphas(betas.iter().map(|b| 1.0 - b).collect())
    }

    /// Standard schedule: `beta` from 1e-4 to 0.02.
    pub fn standard(steps: usize) -> Result<Self> {
        Self::linear(steps, 1e-4, 0.02)
    }

    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(CoreError::Config(
                "diffusion needs at least one step".into(),
            ));
        }
        if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
            return Err(CoreError::Config(format!(
                "retention coefficient {a} is outside (0, 1]"
            )));
        }
        let mut acc = 1.0;
        let alpha_bars = alphas
            .iter()
            .map(|a| {
                acc *= a;
                acc
            })
            .collect();
        Ok(Self { alphas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(CoreError::Config(format!(
                "step {t} is outside 1..={}",
                self.steps()
            )));
        }
        Ok(t - 1)
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn beta(&self, t: usize) -> f64 {
        1.0 - self.alphas[t - 1]
    }

    /// Cumulative retention; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.beta(t).sqrt()
    }

    /// Signal-to-noise ratio `alpha_bar / (1 - alpha_bar)`.
    pub fn snr(&self, t: usize) -> f64 {
        let ab = self.alpha_bar(t);
        ab / (1.0 - ab)
    }

    /// Closed-form forward marginal `sqrt(ab) x0 + sqrt(1 - ab) eps`.
    pub fn q_sample(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        let i = self.check(t)?;
        if x0.len() != eps.len() {
            return Err(CoreError::Shape(format!(
                "x0 has {} values, noise {}",
                x0.len(),
                eps.len()
            )));
        }
        let ab = self.alpha_bars[i];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
    }

    /// One forward step `sqrt(alpha_t) x + sqrt(1 - alpha_t) eps`.
    pub fn step_forward(&self, x: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        let i = self.check(t)?;
        let a = self.alphas[i];
        Ok(x.iter()
            .zip(eps)
            .map(|(x, e)| a.sqrt() * x + (1.0 - a).sqrt() * e)
            .collect())
    }

    /// Reverse-step mean from a noise prediction:
    /// `(x_t - (1 - alpha_t) / sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_t)`.
    pub fn posterior_mean(&self, x_t: &[f64], t: usize, eps: &[f64]) -> Vec<f64> {
        let a = self.alpha(t);
        let c = (1.0 - a) / (1.0 - self.alpha_bar(t)).sqrt();
        x_t.iter()
            .zip(eps)
            .map(|(x, e)| (x - c * e) / a.sqrt())
            .collect()
    }

    /// Short content hash for manifests.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for a in &self.alphas {
            h.update(a.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}
