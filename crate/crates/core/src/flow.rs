//! Flow-matching variant.
//!
//! States follow the linear interpolant `x_t = (1 − t)·x0 + t·ε` with target
//! velocity `ε − x0`. A pair is scored by how well the EMA-token velocity at
//! `t + Δ` transports `x_{t+Δ}` back to `x_t` under a Gaussian local
//! transition of variance `σ²`. The guided loss is the diffusion one with
//! velocities in place of noise predictions and `B(t)` in place of `Ã(t)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agsm::{guided_group_loss, GroupLoss, GuidanceConfig, GuidedProblem, PLTable, PairSelection, RewardModel};
use crate::data;
use crate::denoiser::{Cond, Predictor, Query, SoftTokenBank, TokenMatrix};
use crate::error::{check_dim, Error, Result};
use crate::rng::standard_normal_vec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    /// Lookahead `Δ`.
    pub delta_step: f64,
    /// Local transition variance `σ²`, constant in time.
    pub sigma2: f64,
    /// Reward scale `λ`.
    pub lambda: f64,
    /// Guidance scaling `B`.
    pub b_scale: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig::calibrated(0.01, 1.0)
    }
}

impl FlowConfig {
    /// `B = 1` and `λ = σ²/Δ²`, so that on an exact interpolant path the
    /// reward reduces to `−½‖v̂ − (ε − x0)‖²`.
    pub fn calibrated(delta_step: f64, sigma2: f64) -> Self {
        FlowConfig { delta_step, sigma2, lambda: sigma2 / (delta_step * delta_step), b_scale: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.delta_step) || self.delta_step >= 1.0 {
            return Err(Error::InvalidArgument(format!("delta_step {} must lie in (0, 1)", self.delta_step)));
        }
        if !pos(self.sigma2) || !pos(self.lambda) {
            return Err(Error::InvalidArgument("sigma2 and lambda must be positive".into()));
        }
        if !(self.b_scale.is_finite() && self.b_scale >= 0.0) {
            return Err(Error::InvalidArgument(format!("b_scale {} must be non-negative", self.b_scale)));
        }
        Ok(())
    }

    /// `λ / (2σ²)`.
    pub fn reward_coef(&self) -> f64 {
        self.lambda / (2.0 * self.sigma2)
    }
}

/// `(1 − t)·x0 + t·ε`.
pub fn interpolate(x0: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
    check_dim(x0.len(), eps.len())?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("interpolant time {t} outside [0, 1]")));
    }
    Ok(x0.iter().zip(eps).map(|(a, e)| (1.0 - t) * a + t * e).collect())
}

pub fn target_velocity(x0: &[f64], eps: &[f64]) -> Vec<f64> {
    eps.iter().zip(x0).map(|(e, a)| e - a).collect()
}

/// `−(λ/(2σ²))·‖x_t − (x_{t+Δ} − Δ·v̂)‖²` for a given velocity `v̂`.
pub fn transition_reward(cfg: &FlowConfig, x_t: &[f64], x_next: &[f64], v_hat: &[f64]) -> Result<f64> {
    check_dim(x_t.len(), x_next.len())?;
    check_dim(x_t.len(), v_hat.len())?;
    let d: f64 = x_t
        .iter()
        .zip(x_next)
        .zip(v_hat)
        .map(|((a, n), v)| {
            let r = a - (n - cfg.delta_step * v);
            r * r
        })
        .sum();
    Ok(-cfg.reward_coef() * d)
}

/// Reward of condition `c` with `v̂` predicted by `tokens` at `(x_{t+Δ}, t + Δ)`.
#[allow(clippy::too_many_arguments)]
pub fn flow_reward<P: Predictor + ?Sized>(
    predictor: &P,
    tokens: &TokenMatrix,
    cfg: &FlowConfig,
    x_t: &[f64],
    x_next: &[f64],
    t: f64,
    c: usize,
) -> Result<f64> {
    cfg.validate()?;
    let tn = t + cfg.delta_step;
    if !(0.0..=1.0).contains(&t) || tn > 1.0 + 1e-12 {
        return Err(Error::InvalidArgument(format!("t + delta = {tn} exceeds 1")));
    }
    let v = predictor.predict_batch(&[Query::new(x_next, tn, Cond::Label(c))], Some(tokens))?;
    transition_reward(cfg, x_t, x_next, v.row(0).as_slice().expect("row"))
}

/// A flow group: shared `t` and `ε`, states at `t` and `t + Δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowGroup {
    pub x0: Vec<Vec<f64>>,
    pub cond: Vec<usize>,
    pub t: f64,
    pub eps: Vec<f64>,
    pub x_t: Vec<Vec<f64>>,
    pub x_next: Vec<Vec<f64>>,
}

impl FlowGroup {
    pub fn new(pairs: Vec<(Vec<f64>, usize)>, t: f64, eps: Vec<f64>, cfg: &FlowConfig) -> Result<Self> {
        cfg.validate()?;
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("group needs at least one pair".into()));
        }
        if !(0.0..=1.0 - cfg.delta_step).contains(&t) {
            return Err(Error::InvalidArgument(format!("flow time {t} outside [0, 1 - delta]")));
        }
        let (x0, cond): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        data::check_distinct(&cond)?;
        let x_t = x0.iter().map(|x| interpolate(x, &eps, t)).collect::<Result<_>>()?;
        let x_next = x0.iter().map(|x| interpolate(x, &eps, (t + cfg.delta_step).min(1.0))).collect::<Result<_>>()?;
        Ok(FlowGroup { x0, cond, t, eps, x_t, x_next })
    }

    pub fn size(&self) -> usize {
        self.cond.len()
    }

    pub fn target_velocities(&self) -> Vec<Vec<f64>> {
        self.x0.iter().map(|x| target_velocity(x, &self.eps)).collect()
    }
}

/// `t ~ U[0, 1 − Δ]` and one shared `ε`.
pub fn sample_flow_group<R: Rng + ?Sized>(
    pairs: Vec<(Vec<f64>, usize)>,
    cfg: &FlowConfig,
    rng: &mut R,
) -> Result<FlowGroup> {
    let dim = pairs.first().map(|p| p.0.len()).unwrap_or(0);
    let t = rng.random_range(0.0..=1.0 - cfg.delta_step);
    let eps = standard_normal_vec(rng, dim);
    FlowGroup::new(pairs, t, eps, cfg)
}

fn problem<'a>(cfg: &FlowConfig, batch: &'a FlowGroup, targets: &'a [Vec<f64>]) -> GuidedProblem<'a> {
    GuidedProblem {
        conds: &batch.cond,
        live_x: &batch.x_t,
        live_time: batch.t,
        ema_x: &batch.x_next,
        ema_time: (batch.t + cfg.delta_step).min(1.0),
        base: targets.iter().map(|v| &v[..]).collect(),
        reward: RewardModel::Transition {
            coef: cfg.reward_coef(),
            step: cfg.delta_step,
            x_t: &batch.x_t,
            x_next: &batch.x_next,
        },
        scale: cfg.b_scale,
    }
}

pub(crate) fn flow_group_loss<P: Predictor + ?Sized>(
    predictor: &P,
    bank: &SoftTokenBank,
    cfg: &FlowConfig,
    batch: &FlowGroup,
    guidance: &GuidanceConfig,
    selection: PairSelection<'_>,
) -> Result<GroupLoss> {
    cfg.validate()?;
    let targets = batch.target_velocities();
    Ok(guided_group_loss(predictor, bank, &problem(cfg, batch, &targets), guidance, selection)?.0)
}

/// Dual-token guided velocity regression over all `G²` pairs.
pub fn flow_agsm_group_loss<P: Predictor + ?Sized>(
    predictor: &P,
    bank: &SoftTokenBank,
    cfg: &FlowConfig,
    batch: &FlowGroup,
    guidance: &GuidanceConfig,
) -> Result<GroupLoss> {
    flow_group_loss(predictor, bank, cfg, batch, guidance, PairSelection::Full)
}

/// Pairwise flow variant; see [`crate::agsm::bt_group_loss`].
pub fn flow_bt_group_loss<P: Predictor + ?Sized>(
    predictor: &P,
    bank: &SoftTokenBank,
    cfg: &FlowConfig,
    batch: &FlowGroup,
    guidance: &GuidanceConfig,
    partners: &[usize],
) -> Result<GroupLoss> {
    flow_group_loss(predictor, bank, cfg, batch, guidance, PairSelection::Partners(partners))
}

pub fn flow_pl_table<P: Predictor + ?Sized>(
    predictor: &P,
    bank: &SoftTokenBank,
    cfg: &FlowConfig,
    batch: &FlowGroup,
    guidance: &GuidanceConfig,
) -> Result<PLTable> {
    cfg.validate()?;
    let targets = batch.target_velocities();
    Ok(guided_group_loss(predictor, bank, &problem(cfg, batch, &targets), guidance, PairSelection::Full)?.1)
}
