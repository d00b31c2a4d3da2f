//! Ancestral DDPM and Euler flow samplers with classifier-free guidance.
//!
//! All chains advance together so every network call is one batch. Noise
//! for step `k` comes from a stream keyed by `(seed, k)`, which gives runs
//! that differ only in guidance strategy common random numbers.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Cond, Predictor, Query, SoftTokenBank, TokenMatrix};
use crate::error::{Error, Result};
use crate::rng::{keyed, standard_normal_vec, Stream};
use crate::schedule::NoiseSchedule;

/// Which tokens feed the two CFG branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// `(c, ψ⁺)` against `(∅, ψ⁺)`.
    PosOnly,
    /// `(c, ψ⁺)` against `(∅, ψ⁻)`.
    PosCondNegUncond,
    /// `(c, none)` against `(∅, none)`.
    NoTokens,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::PosOnly => "pos-only",
            Strategy::PosCondNegUncond => "pos-cond-neg-uncond",
            Strategy::NoTokens => "no-tokens",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pos-only" => Ok(Strategy::PosOnly),
            "pos-cond-neg-uncond" => Ok(Strategy::PosCondNegUncond),
            "no-tokens" => Ok(Strategy::NoTokens),
            other => Err(Error::InvalidArgument(format!("unknown sampling strategy {other:?}"))),
        }
    }

    fn branches<'b>(&self, bank: Option<&'b SoftTokenBank>) -> Result<(Option<&'b TokenMatrix>, Option<&'b TokenMatrix>)> {
        if *self == Strategy::NoTokens {
            return Ok((None, None));
        }
        let bank = bank.ok_or_else(|| Error::InvalidArgument(format!("strategy {} needs a token bank", self.name())))?;
        Ok(match self {
            Strategy::PosOnly => (Some(&bank.psi_pos), Some(&bank.psi_pos)),
            Strategy::PosCondNegUncond => (Some(&bank.psi_pos), Some(&bank.psi_neg)),
            Strategy::NoTokens => unreachable!(),
        })
    }
}

/// `u + scale·(c − u)` for every chain; `conds[r]` labels chain `r`.
#[allow(clippy::too_many_arguments)]
pub fn cfg_predict_batch<P: Predictor + ?Sized>(
    predictor: &P,
    bank: Option<&SoftTokenBank>,
    xs: &[Vec<f64>],
    time: f64,
    conds: &[usize],
    scale: f64,
    strategy: Strategy,
) -> Result<Array2<f64>> {
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(Error::InvalidArgument(format!("guidance scale {scale} must be finite and >= 0")));
    }
    let (cond_tokens, uncond_tokens) = strategy.branches(bank)?;
    let cq: Vec<Query<'_>> = xs.iter().zip(conds).map(|(x, &c)| Query::new(x, time, Cond::Label(c))).collect();
    let uq: Vec<Query<'_>> = xs.iter().map(|x| Query::new(x, time, Cond::Null)).collect();
    let c = predictor.predict_batch(&cq, cond_tokens)?;
    let mut u = predictor.predict_batch(&uq, uncond_tokens)?;
    u.zip_mut_with(&c, |u, &c| *u += scale * (c - *u));
    Ok(u)
}

/// Single-chain form of [`cfg_predict_batch`].
#[allow(clippy::too_many_arguments)]
pub fn cfg_predict<P: Predictor + ?Sized>(
    predictor: &P,
    bank: Option<&SoftTokenBank>,
    x: &[f64],
    time: f64,
    c: usize,
    scale: f64,
    strategy: Strategy,
) -> Result<Vec<f64>> {
    Ok(cfg_predict_batch(predictor, bank, &[x.to_vec()], time, &[c], scale, strategy)?.row(0).to_vec())
}

fn initial_noise(seed: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = keyed(seed, Stream::Sampling, 0);
    (0..n).map(|_| standard_normal_vec(&mut rng, dim)).collect()
}

/// Ancestral sampling from `t = T` down to `1`, one chain per entry of `conds`.
pub fn ddpm_sample_conds<P: Predictor + ?Sized>(
    predictor: &P,
    bank: Option<&SoftTokenBank>,
    sched: &NoiseSchedule,
    conds: &[usize],
    scale: f64,
    strategy: Strategy,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let n = conds.len();
    let dim = predictor.output_dim();
    let mut xs = initial_noise(seed, n, dim);
    if n == 0 {
        return Ok(xs);
    }
    for t in (1..=sched.timesteps()).rev() {
        let eps = cfg_predict_batch(predictor, bank, &xs, sched.time_fraction(t), conds, scale, strategy)?;
        let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
        let inv = 1.0 / sched.alpha(t).sqrt();
        let sd = sched.posterior_var(t).sqrt();
        let mut rng = keyed(seed, Stream::Sampling, t as u64);
        for (r, x) in xs.iter_mut().enumerate() {
            let z = if t > 1 { standard_normal_vec(&mut rng, dim) } else { vec![0.0; dim] };
            for k in 0..dim {
                x[k] = (x[k] - coef * eps[[r, k]]) * inv + sd * z[k];
            }
        }
        if xs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sampler state at t={t}")));
        }
    }
    Ok(xs)
}

/// `n` ancestral samples for condition `c`.
#[allow(clippy::too_many_arguments)]
pub fn ddpm_sample<P: Predictor + ?Sized>(
    predictor: &P,
    bank: Option<&SoftTokenBank>,
    sched: &NoiseSchedule,
    c: usize,
    n: usize,
    scale: f64,
    strategy: Strategy,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    ddpm_sample_conds(predictor, bank, sched, &vec![c; n], scale, strategy, seed)
}

/// Euler integration of `dx/dt = v` from `t = 1` to `0` in `steps` steps.
#[allow(clippy::too_many_arguments)]
pub fn flow_sample_conds<P: Predictor + ?Sized>(
    predictor: &P,
    bank: Option<&SoftTokenBank>,
    conds: &[usize],
    steps: usize,
    scale: f64,
    strategy: Strategy,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if steps < 1 {
        return Err(Error::InvalidArgument("flow sampling needs at least one step".into()));
    }
    let dim = predictor.output_dim();
    let mut xs = initial_noise(seed, conds.len(), dim);
    if conds.is_empty() {
        return Ok(xs);
    }
    let h = 1.0 / steps as f64;
    for k in 0..steps {
        let time = 1.0 - k as f64 * h;
        let v = cfg_predict_batch(predictor, bank, &xs, time, conds, scale, strategy)?;
        for (r, x) in xs.iter_mut().enumerate() {
            for d in 0..dim {
                x[d] -= h * v[[r, d]];
            }
        }
    }
    Ok(xs)
}

#[allow(clippy::too_many_arguments)]
pub fn flow_sample<P: Predictor + ?Sized>(
    predictor: &P,
    bank: Option<&SoftTokenBank>,
    c: usize,
    n: usize,
    steps: usize,
    scale: f64,
    strategy: Strategy,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    flow_sample_conds(predictor, bank, &vec![c; n], steps, scale, strategy, seed)
}
