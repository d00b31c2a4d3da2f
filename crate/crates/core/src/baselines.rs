//! Comparison objectives: the contrastive SoftREPA loss with a single shared
//! token matrix, and the positive-only ablation of the guided objective.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::agsm::{self, GroupBatch, GroupLoss, GroupStats, GuidanceConfig};
use crate::denoiser::{Cond, Predictor, Query, SoftTokenBank, TokenMatrix};
use crate::error::{check_dim, Error, Result};
use crate::flow::FlowGroup;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoftrepaConfig {
    /// Temperature dividing the squared error, constant over time.
    pub tau: f64,
    /// Feed `exp(ℓ)` rather than `ℓ` to the softmax.
    #[serde(default)]
    pub double_exp: bool,
}

impl Default for SoftrepaConfig {
    fn default() -> Self {
        SoftrepaConfig { tau: 1.0, double_exp: false }
    }
}

impl SoftrepaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::InvalidArgument(format!("tau {} must be positive", self.tau)));
        }
        Ok(())
    }
}

/// `ℓ = −‖ε̂(x_t, t, c; s) − ε‖² / τ`.
#[allow(clippy::too_many_arguments)]
pub fn softrepa_logit<P: Predictor + ?Sized>(
    predictor: &P,
    s: &TokenMatrix,
    sched: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    c: usize,
    eps: &[f64],
    tau: f64,
) -> Result<f64> {
    let q = [Query::new(x_t, sched.time_fraction(t), Cond::Label(c))];
    let pred = predictor.predict_batch(&q, Some(s))?;
    check_dim(eps.len(), pred.ncols())?;
    Ok(-crate::sq_dist(pred.row(0).as_slice().expect("row"), eps) / tau)
}

/// Row-wise cross-entropy over all `G²` logits with the diagonal as the
/// correct class. `base[i]` is the regression target of image `i`.
fn contrastive_loss<P: Predictor + ?Sized>(
    predictor: &P,
    s: &TokenMatrix,
    conds: &[usize],
    xs: &[Vec<f64>],
    time: f64,
    base: &[&[f64]],
    cfg: &SoftrepaConfig,
) -> Result<GroupLoss> {
    cfg.validate()?;
    let g = conds.len();
    if g == 0 {
        return Err(Error::InvalidArgument("empty group".into()));
    }
    crate::data::check_distinct(conds)?;
    let queries: Vec<Query<'_>> =
        (0..g).flat_map(|i| (0..g).map(move |j| (i, j))).map(|(i, j)| Query::new(&xs[i], time, Cond::Label(conds[j]))).collect();
    let pred = predictor.predict_batch(&queries, Some(s))?;
    let dim = pred.ncols();
    let mut stats = GroupStats::default();
    let mut upstream = Array2::zeros((g * g, dim));
    let mut loss = 0.0;
    for i in 0..g {
        check_dim(dim, base[i].len())?;
        let errs: Vec<f64> = (0..g)
            .map(|j| crate::sq_dist(pred.row(i * g + j).as_slice().expect("row"), base[i]))
            .collect();
        let ell: Vec<f64> = errs.iter().map(|e| -e / cfg.tau).collect();
        let logits: Vec<f64> = if cfg.double_exp { ell.iter().map(|l| l.exp()).collect() } else { ell.clone() };
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        loss += lse - logits[i];
        for j in 0..g {
            let p = (logits[j] - lse).exp();
            if p > 0.0 {
                stats.entropy -= p * p.ln();
            }
            let mut coef = (p - if i == j { 1.0 } else { 0.0 }) / g as f64;
            if cfg.double_exp {
                coef *= logits[j];
            }
            // dℓ/dpred = −2(pred − base)/τ
            let k = i * g + j;
            for d in 0..dim {
                upstream[[k, d]] = coef * -2.0 * (pred[[k, d]] - base[i][d]) / cfg.tau;
            }
            if i == j {
                stats.pos_err += errs[j];
                stats.pos_pairs += 1;
            } else {
                stats.neg_err += errs[j];
                stats.neg_pairs += 1;
            }
        }
        stats.rows += 1;
    }
    loss /= g as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("contrastive loss {loss} at time {time:.4}")));
    }
    let grad = predictor.token_vjp(&queries, s, upstream.view())?;
    Ok(GroupLoss { loss, grad_neg: Array2::zeros(grad.raw_dim()), grad_pos: grad, stats })
}

/// Contrastive loss on a diffusion group; the gradient lands in `grad_pos`.
pub fn softrepa_group_loss<P: Predictor + ?Sized>(
    predictor: &P,
    s: &TokenMatrix,
    sched: &NoiseSchedule,
    batch: &GroupBatch,
    cfg: &SoftrepaConfig,
) -> Result<GroupLoss> {
    let base = vec![&batch.eps[..]; batch.size()];
    contrastive_loss(predictor, s, &batch.cond, &batch.x_t, sched.time_fraction(batch.t), &base, cfg)
}

/// Contrastive loss on a flow group with velocity errors as logits.
pub fn softrepa_flow_group_loss<P: Predictor + ?Sized>(
    predictor: &P,
    s: &TokenMatrix,
    batch: &FlowGroup,
    cfg: &SoftrepaConfig,
) -> Result<GroupLoss> {
    let targets = batch.target_velocities();
    let base: Vec<&[f64]> = targets.iter().map(|v| &v[..]).collect();
    contrastive_loss(predictor, s, &batch.cond, &batch.x_t, batch.t, &base, cfg)
}

/// Positive pairs only, averaged over `G`. Deltas still range over the full
/// row, so negatives steer the target without ever being fit; the `ψ⁻`
/// gradient is identically zero.
pub fn positive_only_loss<P: Predictor + ?Sized>(
    predictor: &P,
    bank: &SoftTokenBank,
    sched: &NoiseSchedule,
    batch: &GroupBatch,
    cfg: &GuidanceConfig,
) -> Result<GroupLoss> {
    agsm::diagonal_group_loss(predictor, bank, sched, batch, cfg)
}
