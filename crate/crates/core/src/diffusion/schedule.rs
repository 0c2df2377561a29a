//! Linear noise schedule, prior-shifted forward process and posterior coefficients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `β_t`, `α_t = 1 − β_t` and `ᾱ_t = Π α` for `t = 1..=T`; index 0 holds `ᾱ_0 = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoeffs {
    /// Weight on the reconstructed clean value `ŷ0`.
    pub g0: f64,
    /// Weight on the current noisy value `y_t`.
    pub g1: f64,
    /// Weight on the prior `ỹ`.
    pub g2: f64,
    /// Posterior variance `β̃_t`.
    pub beta_tilde: f64,
}

impl DiffusionSchedule {
    /// `β` linear from `beta_1` to `beta_t` inclusive.
    pub fn linear(steps: usize, beta_1: f64, beta_t: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion needs at least one timestep".into()));
        }
        if !(beta_1 > 0.0 && beta_1 <= beta_t && beta_t < 1.0) {
            return Err(Error::Config(format!(
                "noise schedule needs 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_t}"
            )));
        }
        let mut beta = vec![0.0; steps + 1];
        let mut alpha = vec![1.0; steps + 1];
        let mut alpha_bar = vec![1.0; steps + 1];
        for t in 1..=steps {
            beta[t] = if steps == 1 {
                beta_1
            } else {
                beta_1 + (beta_t - beta_1) * (t - 1) as f64 / (steps - 1) as f64
            };
            alpha[t] = 1.0 - beta[t];
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        }
        Ok(DiffusionSchedule {
            steps,
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn posterior_coeffs(&self, t: usize) -> Result<PosteriorCoeffs> {
        if t < 2 || t > self.steps {
            return Err(Error::Config(format!(
                "posterior coefficients need 2 <= t <= {}, got {t}",
                self.steps
            )));
        }
        let (ab, ab_prev) = (self.alpha_bar[t], self.alpha_bar[t - 1]);
        let (a, b) = (self.alpha[t], self.beta[t]);
        let denom = 1.0 - ab;
        Ok(PosteriorCoeffs {
            g0: b * ab_prev.sqrt() / denom,
            g1: (1.0 - ab_prev) * a.sqrt() / denom,
            g2: 1.0 + (ab.sqrt() - 1.0) * (a.sqrt() + ab_prev.sqrt()) / denom,
            beta_tilde: (1.0 - ab_prev) * b / denom,
        })
    }

    /// Closed-form marginal `√ᾱ_t y0 + √(1−ᾱ_t) ε + (1−√ᾱ_t) ỹ`.
    pub fn forward_sample(&self, y0: f64, prior: f64, t: usize, eps: f64) -> f64 {
        let ab = self.alpha_bar[t];
        ab.sqrt() * y0 + (1.0 - ab).sqrt() * eps + (1.0 - ab.sqrt()) * prior
    }

    /// One forward transition `y_{t−1} → y_t`: `√α_t y + (1−√α_t) ỹ + √β_t ε`.
    pub fn forward_step(&self, y_prev: f64, prior: f64, t: usize, eps: f64) -> f64 {
        let a = self.alpha[t];
        a.sqrt() * y_prev + (1.0 - a.sqrt()) * prior + self.beta[t].sqrt() * eps
    }

    /// Inverts the marginal for `y0` given a noise estimate.
    pub fn reconstruct_y0(&self, y_t: f64, prior: f64, t: usize, eps_hat: f64) -> f64 {
        let ab = self.alpha_bar[t];
        (y_t - (1.0 - ab.sqrt()) * prior - (1.0 - ab).sqrt() * eps_hat) / ab.sqrt()
    }
}
