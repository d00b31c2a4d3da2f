//! Timestep-indexed DDPM constants.
//!
//! Arrays are indexed by the discrete timestep `t ∈ 1..=T`; index 0 holds the
//! `alpha_bar[0] = 1` convention so that `t - 1` lookups never special-case.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// How the per-step reward scale `lambda[t]` is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RewardScale {
    /// `lambda[t]` chosen so that the guidance scaling `A_tilde[t]` is 1.
    Calibrated,
    /// Explicit per-step values, `lambda[t]` at index `t - 1`.
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    timesteps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
    lambda: Vec<f64>,
    reward_coef: Vec<f64>,
    guidance_scale: Vec<f64>,
    scale: RewardScale,
}

impl NoiseSchedule {
    /// Linear beta schedule from `beta_start` to `beta_end`, calibrated.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::Schedule(format!("need at least 2 timesteps, got {timesteps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Schedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let span = (timesteps - 1) as f64;
        let betas = (0..timesteps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
            .collect();
        Self::from_betas(betas)
    }

    /// Schedule from explicit betas (`betas[t - 1]` is `beta[t]`), calibrated.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::Schedule(format!("need at least 2 timesteps, got {}", betas.len())));
        }
        for (i, &b) in betas.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Schedule(format!("beta[{}] = {b} outside (0, 1)", i + 1)));
            }
            if i > 0 && b < betas[i - 1] {
                return Err(Error::Schedule(format!("beta decreases at t = {}", i + 1)));
            }
        }
        let timesteps = betas.len();
        let mut beta = Vec::with_capacity(timesteps + 1);
        beta.push(0.0);
        beta.extend(betas);
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = vec![1.0; timesteps + 1];
        for t in 1..=timesteps {
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        }
        let mut posterior_var = vec![0.0; timesteps + 1];
        for t in 1..=timesteps {
            posterior_var[t] = (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * beta[t];
        }
        let sched = NoiseSchedule {
            timesteps,
            beta,
            alpha,
            alpha_bar,
            posterior_var,
            lambda: vec![0.0; timesteps + 1],
            reward_coef: vec![0.0; timesteps + 1],
            guidance_scale: vec![0.0; timesteps + 1],
            scale: RewardScale::Calibrated,
        };
        Ok(sched.calibrate_lambda())
    }

    /// Sets `lambda[t]` so that `A_tilde[t] = 1` for every step.
    ///
    /// `A[t]` is taken from its closed form `1 / sqrt(1 - alpha_bar[t])`; at
    /// `t = 1` the general ratio is `0/0` and must not be evaluated.
    pub fn calibrate_lambda(mut self) -> Self {
        for t in 1..=self.timesteps {
            let sd = (1.0 - self.alpha_bar[t]).sqrt();
            self.lambda[t] = self.alpha[t] * (1.0 - self.alpha_bar[t - 1]) / (self.beta[t] * sd);
            self.reward_coef[t] = 1.0 / sd;
            self.guidance_scale[t] = 1.0;
        }
        self.scale = RewardScale::Calibrated;
        self
    }

    /// Uses the given reward scale instead of the calibrated one.
    ///
    /// With explicit values `A[1]` is infinite (`1 - alpha_bar[0] = 0`), so
    /// training draws timesteps from [`NoiseSchedule::min_train_timestep`] on.
    pub fn with_reward_scale(self, scale: RewardScale) -> Result<Self> {
        match scale {
            RewardScale::Calibrated => Ok(self.calibrate_lambda()),
            RewardScale::Explicit(lambda) => {
                check_dim(self.timesteps, lambda.len())?;
                if lambda.iter().any(|l| !l.is_finite() || *l <= 0.0) {
                    return Err(Error::Schedule("lambda must be finite and positive".into()));
                }
                let mut s = self;
                for t in 1..=s.timesteps {
                    let l = lambda[t - 1];
                    s.lambda[t] = l;
                    let a = l * s.beta[t] / (s.alpha[t] * (1.0 - s.alpha_bar[t - 1]));
                    s.reward_coef[t] = a;
                    s.guidance_scale[t] = a * (1.0 - s.alpha_bar[t]).sqrt();
                }
                s.scale = RewardScale::Explicit(lambda);
                Ok(s)
            }
        }
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn reward_scale(&self) -> &RewardScale {
        &self.scale
    }

    pub fn is_calibrated(&self) -> bool {
        matches!(self.scale, RewardScale::Calibrated)
    }

    /// Smallest timestep at which the reward scaling is finite.
    pub fn min_train_timestep(&self) -> usize {
        if self.is_calibrated() {
            1
        } else {
            2
        }
    }

    /// `beta[1..=T]` in order.
    pub fn betas(&self) -> &[f64] {
        &self.beta[1..]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    /// Defined for `t ∈ 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_var[t]
    }

    pub fn lambda(&self, t: usize) -> f64 {
        self.lambda[t]
    }

    /// `A[t]`, the factor in the reward `-(A/2)‖ε̂ - ε‖²`.
    pub fn reward_coef(&self, t: usize) -> f64 {
        self.reward_coef[t]
    }

    /// `A_tilde[t] = A[t]·sqrt(1 - alpha_bar[t])`, the guidance scaling.
    pub fn guidance_scale(&self, t: usize) -> f64 {
        self.guidance_scale[t]
    }

    /// `t / T`, the time input of the denoiser.
    pub fn time_fraction(&self, t: usize) -> f64 {
        t as f64 / self.timesteps as f64
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if (1..=self.timesteps).contains(&t) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("timestep {t} outside 1..={}", self.timesteps)))
        }
    }

    /// `x_t = sqrt(alpha_bar[t])·x0 + sqrt(1 - alpha_bar[t])·eps`.
    pub fn forward_noise(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_t(t)?;
        check_dim(x0.len(), eps.len())?;
        let a = self.alpha_bar[t].sqrt();
        let s = (1.0 - self.alpha_bar[t]).sqrt();
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
    }
}
