//! Alignment-guided score matching.
//!
//! For a group of `G` images and `G` distinct conditions, every pair `(i, j)`
//! is scored by an implicit reward: the negative scaled denoising error of the
//! EMA-token prediction. A row-wise softmax over `j` gives Plackett–Luce
//! weights; the guidance delta of a pair is its EMA prediction minus the
//! weighted mean over the row. Positive pairs (`i = j`) regress the live
//! positive-token prediction onto `ε + γ⁺·Ã(t)·Δ`, negative pairs the live
//! negative-token prediction onto `ε − γ⁻·Ã(t)·Δ`. Targets carry no gradient.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{softrepa_flow_group_loss, softrepa_group_loss, SoftrepaConfig};
use crate::data::{self, MixtureSpec};
use crate::denoiser::{Cond, Polarity, Predictor, Query, SoftTokenBank, TokenMatrix};
use crate::error::{check_dim, Error, Result};
use crate::flow::{flow_group_loss, sample_flow_group, FlowConfig};
use crate::optim::{AdamW, CosineRestarts};
use crate::rng::{self, Stream};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    /// Rewards are divided by this before the softmax.
    #[serde(default = "one")]
    pub temperature: f64,
}

fn one() -> f64 {
    1.0
}

impl GuidanceConfig {
    pub fn new(gamma_pos: f64, gamma_neg: f64) -> Self {
        GuidanceConfig { gamma_pos, gamma_neg, temperature: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.gamma_pos) || !ok(self.gamma_neg) {
            return Err(Error::InvalidArgument(format!(
                "guidance scales must be finite and non-negative, got ({}, {})",
                self.gamma_pos, self.gamma_neg
            )));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig::new(1.0, 1.0)
    }
}

/// A `G × G` grid of (image, condition) pairings sharing one timestep and
/// one noise vector. Pair `(i, j)` is positive iff `i == j`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupBatch {
    pub x0: Vec<Vec<f64>>,
    pub cond: Vec<usize>,
    pub t: usize,
    pub eps: Vec<f64>,
    pub x_t: Vec<Vec<f64>>,
}

impl GroupBatch {
    pub fn new(pairs: Vec<(Vec<f64>, usize)>, t: usize, eps: Vec<f64>, sched: &NoiseSchedule) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("group needs at least one pair".into()));
        }
        let (x0, cond): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        data::check_distinct(&cond)?;
        let x_t = x0.iter().map(|x| sched.forward_noise(x, t, &eps)).collect::<Result<_>>()?;
        Ok(GroupBatch { x0, cond, t, eps, x_t })
    }

    pub fn size(&self) -> usize {
        self.cond.len()
    }

    pub fn positive_pairs(&self) -> impl Iterator<Item = (usize, usize)> {
        (0..self.size()).map(|i| (i, i))
    }

    pub fn negative_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let g = self.size();
        (0..g).flat_map(move |i| (0..g).filter(move |&j| j != i).map(move |j| (i, j)))
    }
}

/// `r = −(A[t]/2)·‖ε̂ − ε‖²`.
pub fn alignment_reward(sched: &NoiseSchedule, ema_pred: &[f64], eps: &[f64], t: usize) -> Result<f64> {
    check_dim(eps.len(), ema_pred.len())?;
    Ok(-0.5 * sched.reward_coef(t) * crate::sq_dist(ema_pred, eps))
}

/// Softmax with max-subtraction.
pub fn pl_weights(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::InvalidArgument("no candidates".into()));
    }
    if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::NonFinite(format!("reward {r}")));
    }
    let max = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = rewards.iter().map(|r| (r - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// `Σ_k w_k·(ε̂_j − ε̂_k)`. Summing differences keeps full relative precision
/// when `w_j` is within rounding of 1.
fn residual(preds: &[Vec<f64>], weights: &[f64], j: usize) -> Vec<f64> {
    let mut out = vec![0.0; preds[j].len()];
    for (p, w) in preds.iter().zip(weights) {
        for ((o, a), b) in out.iter_mut().zip(&preds[j]).zip(p) {
            *o += w * (a - b);
        }
    }
    out
}

/// `Δ_j = ε̂_j − Σ_k w_k·ε̂_k`.
pub fn guidance_delta(ema_preds: &[Vec<f64>], weights: &[f64], j: usize) -> Result<Vec<f64>> {
    check_dim(ema_preds.len(), weights.len())?;
    if j >= ema_preds.len() {
        return Err(Error::InvalidArgument(format!("candidate {j} out of range")));
    }
    for p in ema_preds {
        check_dim(ema_preds[0].len(), p.len())?;
    }
    Ok(residual(ema_preds, weights, j))
}

/// `ε + γ⁺·Ã·Δ` for positive pairs, `ε − γ⁻·Ã·Δ` for negative pairs.
pub fn target_noise(eps: &[f64], delta: &[f64], is_positive: bool, cfg: &GuidanceConfig, a_tilde: f64) -> Vec<f64> {
    let coef = if is_positive { cfg.gamma_pos * a_tilde } else { -cfg.gamma_neg * a_tilde };
    eps.iter().zip(delta).map(|(e, d)| e + coef * d).collect()
}

/// `(‖Δ_j‖, max_k ‖ε̂_j − ε̂_k‖, holds)`: the guidance delta is a residual
/// against a convex combination, so it never exceeds the widest spread.
pub fn stability_bound_check(ema_preds: &[Vec<f64>], weights: &[f64], j: usize) -> Result<(f64, f64, bool)> {
    let delta = guidance_delta(ema_preds, weights, j)?;
    let lhs = crate::norm(&delta);
    let rhs = ema_preds.iter().map(|p| crate::sq_dist(&ema_preds[j], p).sqrt()).fold(0.0, f64::max);
    Ok((lhs, rhs, lhs <= rhs + 1e-12))
}

/// Rewards, weights and deltas of one group. Row `i` ranges over
/// `candidates[i]` (condition slots `j` competing for image `i`).
#[derive(Debug, Clone, PartialEq)]
pub struct PLTable {
    pub candidates: Vec<Vec<usize>>,
    pub rewards: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
    pub ema_pred: Vec<Vec<Vec<f64>>>,
    pub delta: Vec<Vec<Vec<f64>>>,
}

impl PLTable {
    pub fn entropy(&self, row: usize) -> f64 {
        -self.weights[row].iter().filter(|w| **w > 0.0).map(|w| w * w.ln()).sum::<f64>()
    }
}

/// Running sums from one or more group evaluations.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GroupStats {
    /// `Σ ‖pred − plain target‖²` over positive pairs.
    pub pos_err: f64,
    pub pos_pairs: usize,
    pub neg_err: f64,
    pub neg_pairs: usize,
    pub delta_norm: f64,
    pub deltas: usize,
    pub entropy: f64,
    pub rows: usize,
}

impl GroupStats {
    pub fn merge(&mut self, o: &GroupStats) {
        self.pos_err += o.pos_err;
        self.pos_pairs += o.pos_pairs;
        self.neg_err += o.neg_err;
        self.neg_pairs += o.neg_pairs;
        self.delta_norm += o.delta_norm;
        self.deltas += o.deltas;
        self.entropy += o.entropy;
        self.rows += o.rows;
    }

    fn mean(sum: f64, n: usize) -> f64 {
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    }

    pub fn pos_loss(&self) -> f64 {
        Self::mean(self.pos_err, self.pos_pairs)
    }

    pub fn neg_loss(&self) -> f64 {
        Self::mean(self.neg_err, self.neg_pairs)
    }

    pub fn mean_delta_norm(&self) -> f64 {
        Self::mean(self.delta_norm, self.deltas)
    }

    pub fn mean_entropy(&self) -> f64 {
        Self::mean(self.entropy, self.rows)
    }
}

/// Scalar loss of one group and its gradients on the live token matrices.
#[derive(Debug, Clone)]
pub struct GroupLoss {
    pub loss: f64,
    pub grad_pos: TokenMatrix,
    pub grad_neg: TokenMatrix,
    pub stats: GroupStats,
}

/// Which pairs compete in the softmax and which pairs are regressed.
#[derive(Debug, Clone, Copy)]
pub enum PairSelection<'a> {
    /// Every condition competes; every pair is trained.
    Full,
    /// Every condition competes; only positive pairs are trained.
    Diagonal,
    /// Row `i` compares the positive against the single negative
    /// `partners[i]`; both are trained.
    Partners(&'a [usize]),
}

/// How an EMA prediction for pair `(i, ·)` turns into a reward.
#[derive(Debug, Clone, Copy)]
pub(crate) enum RewardModel<'a> {
    /// `−coef·‖ε̂ − ε‖²`
    Denoising { coef: f64, eps: &'a [f64] },
    /// `−coef·‖x_t[i] − (x_next[i] − step·v̂)‖²`
    Transition { coef: f64, step: f64, x_t: &'a [Vec<f64>], x_next: &'a [Vec<f64>] },
}

impl RewardModel<'_> {
    fn reward(&self, i: usize, pred: &[f64]) -> f64 {
        match *self {
            RewardModel::Denoising { coef, eps } => -coef * crate::sq_dist(pred, eps),
            RewardModel::Transition { coef, step, x_t, x_next } => {
                let d: f64 = x_t[i]
                    .iter()
                    .zip(&x_next[i])
                    .zip(pred)
                    .map(|((a, n), v)| {
                        let r = a - (n - step * v);
                        r * r
                    })
                    .sum();
                -coef * d
            }
        }
    }
}

/// One group in the layout shared by the diffusion and flow objectives.
pub(crate) struct GuidedProblem<'a> {
    pub conds: &'a [usize],
    pub live_x: &'a [Vec<f64>],
    pub live_time: f64,
    pub ema_x: &'a [Vec<f64>],
    pub ema_time: f64,
    /// Plain regression target per image (`ε`, or `ε − x0` for flows).
    pub base: Vec<&'a [f64]>,
    pub reward: RewardModel<'a>,
    /// `Ã(t)` or `B(t)`.
    pub scale: f64,
}

fn selection_rows(g: usize, selection: PairSelection<'_>) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    match selection {
        PairSelection::Full => Ok(((0..g).map(|_| (0..g).collect()).collect(), (0..g).map(|_| (0..g).collect()).collect())),
        PairSelection::Diagonal => Ok(((0..g).map(|_| (0..g).collect()).collect(), (0..g).map(|i| vec![i]).collect())),
        PairSelection::Partners(p) => {
            check_dim(g, p.len())?;
            let mut rows = Vec::with_capacity(g);
            for (i, &j) in p.iter().enumerate() {
                if j == i || j >= g {
                    return Err(Error::InvalidArgument(format!("row {i} needs a distinct partner, got {j}")));
                }
                rows.push(vec![i, j]);
            }
            Ok((rows.clone(), rows))
        }
    }
}

/// Predictions for `pairs`, positives with `pos` tokens, negatives with `neg`.
fn predict_pairs<P: Predictor + ?Sized>(
    predictor: &P,
    pairs: &[(usize, usize)],
    xs: &[Vec<f64>],
    time: f64,
    conds: &[usize],
    pos: &TokenMatrix,
    neg: &TokenMatrix,
) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![Vec::new(); pairs.len()];
    for polarity in [Polarity::Positive, Polarity::Negative] {
        let idx: Vec<usize> =
            (0..pairs.len()).filter(|&r| (pairs[r].0 == pairs[r].1) == (polarity == Polarity::Positive)).collect();
        if idx.is_empty() {
            continue;
        }
        let queries: Vec<Query<'_>> = idx
            .iter()
            .map(|&r| Query::new(&xs[pairs[r].0], time, Cond::Label(conds[pairs[r].1])))
            .collect();
        let tokens = if polarity == Polarity::Positive { pos } else { neg };
        let res = predictor.predict_batch(&queries, Some(tokens))?;
        for (k, &r) in idx.iter().enumerate() {
            out[r] = res.row(k).to_vec();
        }
    }
    Ok(out)
}

/// The guided objective on one group; returns the loss and the PL table.
pub(crate) fn guided_group_loss<P: Predictor + ?Sized>(
    predictor: &P,
    bank: &SoftTokenBank,
    problem: &GuidedProblem<'_>,
    guidance: &GuidanceConfig,
    selection: PairSelection<'_>,
) -> Result<(GroupLoss, PLTable)> {
    guidance.validate()?;
    let g = problem.conds.len();
    if g == 0 {
        return Err(Error::InvalidArgument("empty group".into()));
    }
    data::check_distinct(problem.conds)?;
    let (candidates, trained) = selection_rows(g, selection)?;

    // EMA predictions over every competing pair.
    let cand_pairs: Vec<(usize, usize)> =
        candidates.iter().enumerate().flat_map(|(i, row)| row.iter().map(move |&j| (i, j))).collect();
    let ema_flat = predict_pairs(
        predictor,
        &cand_pairs,
        problem.ema_x,
        problem.ema_time,
        problem.conds,
        &bank.ema_pos,
        &bank.ema_neg,
    )?;
    let mut ema_pred: Vec<Vec<Vec<f64>>> = Vec::with_capacity(g);
    let mut it = ema_flat.into_iter();
    for row in &candidates {
        ema_pred.push(it.by_ref().take(row.len()).collect());
    }

    let mut rewards = Vec::with_capacity(g);
    let mut weights = Vec::with_capacity(g);
    let mut delta = Vec::with_capacity(g);
    for i in 0..g {
        let r: Vec<f64> = ema_pred[i].iter().map(|p| problem.reward.reward(i, p)).collect();
        let scaled: Vec<f64> = r.iter().map(|v| v / guidance.temperature).collect();
        let w = pl_weights(&scaled).map_err(|e| {
            Error::NonFinite(format!("rewards at time {:.4} (row {i}): {e}; rewards {r:?}", problem.live_time))
        })?;
        delta.push((0..ema_pred[i].len()).map(|j| residual(&ema_pred[i], &w, j)).collect::<Vec<Vec<f64>>>());
        rewards.push(r);
        weights.push(w);
    }
    let table = PLTable { candidates: candidates.clone(), rewards, weights, ema_pred, delta };

    // Live predictions and targets on trained pairs.
    let train_pairs: Vec<(usize, usize, usize)> = trained
        .iter()
        .enumerate()
        .flat_map(|(i, row)| {
            let cand = &candidates[i];
            row.iter().map(move |&j| (i, j, cand.iter().position(|&c| c == j).expect("trained pair competes")))
        })
        .collect();
    let pairs: Vec<(usize, usize)> = train_pairs.iter().map(|&(i, j, _)| (i, j)).collect();
    let preds =
        predict_pairs(predictor, &pairs, problem.live_x, problem.live_time, problem.conds, &bank.psi_pos, &bank.psi_neg)?;

    let n = pairs.len() as f64;
    let dim = predictor.output_dim();
    let mut loss = 0.0;
    let mut stats = GroupStats::default();
    let mut up_pos = Vec::new();
    let mut up_neg = Vec::new();
    let mut q_pos = Vec::new();
    let mut q_neg = Vec::new();
    for (&(i, j, k), pred) in train_pairs.iter().zip(&preds) {
        check_dim(dim, pred.len())?;
        let positive = i == j;
        let d = &table.delta[i][k];
        let target = target_noise(problem.base[i], d, positive, guidance, problem.scale);
        loss += crate::sq_dist(pred, &target);
        let plain = crate::sq_dist(pred, problem.base[i]);
        stats.delta_norm += crate::norm(d);
        stats.deltas += 1;
        let up: Vec<f64> = pred.iter().zip(&target).map(|(p, t)| 2.0 * (p - t) / n).collect();
        let q = Query::new(&problem.live_x[i], problem.live_time, Cond::Label(problem.conds[j]));
        if positive {
            stats.pos_err += plain;
            stats.pos_pairs += 1;
            up_pos.extend(up);
            q_pos.push(q);
        } else {
            stats.neg_err += plain;
            stats.neg_pairs += 1;
            up_neg.extend(up);
            q_neg.push(q);
        }
    }
    loss /= n;
    for i in 0..g {
        stats.entropy += table.entropy(i);
        stats.rows += 1;
    }
    if !loss.is_finite() {
        let flat: Vec<f64> = table.rewards.iter().flatten().copied().collect();
        let lo = flat.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = flat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        return Err(Error::NonFinite(format!(
            "group loss {loss} at time {:.4}; reward spread [{lo}, {hi}]",
            problem.live_time
        )));
    }
    let grad_pos = if q_pos.is_empty() {
        Array2::zeros(bank.psi_pos.raw_dim())
    } else {
        let up = Array2::from_shape_vec((q_pos.len(), dim), up_pos).expect("shape");
        predictor.token_vjp(&q_pos, &bank.psi_pos, up.view())?
    };
    let grad_neg = if q_neg.is_empty() {
        Array2::zeros(bank.psi_neg.raw_dim())
    } else {
        let up = Array2::from_shape_vec((q_neg.len(), dim), up_neg).expect("shape");
        predictor.token_vjp(&q_neg, &bank.psi_neg, up.view())?
    };
    Ok((GroupLoss { loss, grad_pos, grad_neg, stats }, table))
}

fn diffusion_problem<'a>(sched: &NoiseSchedule, batch: &'a GroupBatch) -> Result<GuidedProblem<'a>> {
    let t = batch.t;
    if !(1..=sched.timesteps()).contains(&t) {
        return Err(Error::InvalidArgument(format!("timestep {t} outside 1..={}", sched.timesteps())));
    }
    let coef = 0.5 * sched.reward_coef(t);
    let time = sched.time_fraction(t);
    Ok(GuidedProblem {
        conds: &batch.cond,
        live_x: &batch.x_t,
        live_time: time,
        ema_x: &batch.x_t,
        ema_time: time,
        base: vec![&batch.eps[..]; batch.size()],
        reward: RewardModel::Denoising { coef, eps: &batch.eps },
        scale: sched.guidance_scale(t),
    })
}

/// Full dual-token objective over all `G²` pairs, averaged.
pub fn agsm_group_loss<P: Predictor + ?Sized>(
    predictor: &P,
    bank: &SoftTokenBank,
    sched: &NoiseSchedule,
    batch: &GroupBatch,
    cfg: &GuidanceConfig,
) -> Result<GroupLoss> {
    let problem = diffusion_problem(sched, batch)?;
    Ok(guided_group_loss(predictor, bank, &problem, cfg, PairSelection::Full)?.0)
}

/// The PL table built inside [`agsm_group_loss`].
pub fn agsm_pl_table<P: Predictor + ?Sized>(
    predictor: &P,
    bank: &SoftTokenBank,
    sched: &NoiseSchedule,
    batch: &GroupBatch,
    cfg: &GuidanceConfig,
) -> Result<PLTable> {
    let problem = diffusion_problem(sched, batch)?;
    Ok(guided_group_loss(predictor, bank, &problem, cfg, PairSelection::Full)?.1)
}

/// Pairwise variant: each positive is compared with the one negative
/// `partners[i]` through a two-candidate softmax; loss averaged over the
/// `2G` compared pairs.
pub fn bt_group_loss<P: Predictor + ?Sized>(
    predictor: &P,
    bank: &SoftTokenBank,
    sched: &NoiseSchedule,
    batch: &GroupBatch,
    cfg: &GuidanceConfig,
    partners: &[usize],
) -> Result<GroupLoss> {
    let problem = diffusion_problem(sched, batch)?;
    Ok(guided_group_loss(predictor, bank, &problem, cfg, PairSelection::Partners(partners))?.0)
}

/// Positive-only variant over the diagonal, averaged over `G` pairs.
pub(crate) fn diagonal_group_loss<P: Predictor + ?Sized>(
    predictor: &P,
    bank: &SoftTokenBank,
    sched: &NoiseSchedule,
    batch: &GroupBatch,
    cfg: &GuidanceConfig,
) -> Result<GroupLoss> {
    let problem = diffusion_problem(sched, batch)?;
    Ok(guided_group_loss(predictor, bank, &problem, cfg, PairSelection::Diagonal)?.0)
}

/// One uniformly drawn negative partner per row (`G ≥ 2`).
pub fn sample_bt_partners<R: Rng + ?Sized>(g: usize, rng: &mut R) -> Result<Vec<usize>> {
    if g < 2 {
        return Err(Error::InvalidArgument("pairwise comparison needs G >= 2".into()));
    }
    Ok((0..g)
        .map(|i| {
            let j = rng.random_range(0..g - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        })
        .collect())
}

// --- training loop -------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Dual tokens, PL over the whole group.
    Agsm,
    /// Dual tokens, pairwise comparison against one negative.
    Bt,
    /// Only `ψ⁺` on positive pairs; negatives guide but are never fit.
    PositiveOnly,
    /// The full objective with one token matrix for both subsets.
    SharedToken,
    /// Contrastive baseline with one shared token matrix.
    Softrepa,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Agsm => "agsm",
            Method::Bt => "bt",
            Method::PositiveOnly => "positive-only",
            Method::SharedToken => "shared-token",
            Method::Softrepa => "softrepa",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "agsm" => Ok(Method::Agsm),
            "bt" => Ok(Method::Bt),
            "positive-only" => Ok(Method::PositiveOnly),
            "shared-token" => Ok(Method::SharedToken),
            "softrepa" => Ok(Method::Softrepa),
            other => Err(Error::InvalidArgument(format!("unknown method {other:?}"))),
        }
    }

    /// Methods whose single token matrix is mirrored into both polarities.
    pub fn shares_tokens(&self) -> bool {
        matches!(self, Method::SharedToken | Method::Softrepa)
    }
}

/// The frozen backbone's parameterization.
#[derive(Debug, Clone, Copy)]
pub enum Backbone<'a> {
    Diffusion(&'a NoiseSchedule),
    Flow(&'a FlowConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosttrainConfig {
    pub method: Method,
    pub steps: usize,
    pub lr: CosineRestarts,
    pub weight_decay: f64,
    pub group_size: usize,
    pub groups_per_step: usize,
    pub guidance: GuidanceConfig,
    pub softrepa: SoftrepaConfig,
}

impl Default for PosttrainConfig {
    fn default() -> Self {
        PosttrainConfig {
            method: Method::Agsm,
            steps: 5000,
            lr: CosineRestarts { base_lr: 1e-3, min_lr: 0.0, period: 1000, period_mult: 1 },
            weight_decay: 1e-4,
            group_size: 4,
            groups_per_step: 4,
            guidance: GuidanceConfig::default(),
            softrepa: SoftrepaConfig::default(),
        }
    }
}

/// Metrics of one post-training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: usize,
    pub pos_loss: f64,
    pub neg_loss: f64,
    pub delta_norm: f64,
    pub pl_entropy: f64,
    pub val_alignment: Option<f64>,
}

/// Evaluates one group of `method` on the given backbone.
pub fn method_group_loss<P: Predictor + ?Sized, R: Rng + ?Sized>(
    predictor: &P,
    bank: &SoftTokenBank,
    backbone: Backbone<'_>,
    spec: &MixtureSpec,
    cfg: &PosttrainConfig,
    rng: &mut R,
) -> Result<GroupLoss> {
    let pairs = data::sample_distinct_pairs(spec, cfg.group_size, rng)?;
    let partners = if cfg.method == Method::Bt { sample_bt_partners(cfg.group_size, rng)? } else { Vec::new() };
    let selection = match cfg.method {
        Method::Agsm | Method::SharedToken => PairSelection::Full,
        Method::PositiveOnly => PairSelection::Diagonal,
        Method::Bt => PairSelection::Partners(&partners),
        Method::Softrepa => PairSelection::Full,
    };
    match backbone {
        Backbone::Diffusion(sched) => {
            let batch = data::build_group(pairs, sched, rng)?;
            if cfg.method == Method::Softrepa {
                return softrepa_group_loss(predictor, &bank.psi_pos, sched, &batch, &cfg.softrepa);
            }
            let problem = diffusion_problem(sched, &batch)?;
            Ok(guided_group_loss(predictor, bank, &problem, &cfg.guidance, selection)?.0)
        }
        Backbone::Flow(fc) => {
            let batch = sample_flow_group(pairs, fc, rng)?;
            if cfg.method == Method::Softrepa {
                return softrepa_flow_group_loss(predictor, &bank.psi_pos, &batch, &cfg.softrepa);
            }
            flow_group_loss(predictor, bank, fc, &batch, &cfg.guidance, selection)
        }
    }
}

/// Runs the post-training loop and returns the trained bank and one record
/// per step.
///
/// Each step draws `groups_per_step` groups from `spec`, averages their
/// losses and token gradients, takes one AdamW step on the trainable tokens
/// and then updates both EMA shadows. `validate(step, bank)` is called after
/// every step; a `Some` result lands in the record's `val_alignment`.
pub fn posttrain<P: Predictor + ?Sized>(
    predictor: &P,
    bank: SoftTokenBank,
    backbone: Backbone<'_>,
    spec: &MixtureSpec,
    cfg: &PosttrainConfig,
    seed: u64,
    validate: &mut dyn FnMut(usize, &SoftTokenBank) -> Option<f64>,
) -> Result<(SoftTokenBank, Vec<RunRecord>)> {
    if cfg.group_size == 0 || cfg.groups_per_step == 0 {
        return Err(Error::InvalidArgument("group size and groups per step must be positive".into()));
    }
    if cfg.group_size > spec.num_conditions() {
        return Err(Error::InvalidArgument(format!(
            "group size {} exceeds the {} available conditions",
            cfg.group_size,
            spec.num_conditions()
        )));
    }
    cfg.guidance.validate()?;
    let mut bank = bank;
    if cfg.method.shares_tokens() {
        bank.psi_neg = bank.psi_pos.clone();
        bank.ema_neg = bank.ema_pos.clone();
    }
    let mut rng = rng::substream(seed, Stream::Training);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut records = Vec::with_capacity(cfg.steps);
    let groups = cfg.groups_per_step as f64;
    for step in 0..cfg.steps {
        let mut stats = GroupStats::default();
        let mut grad_pos = Array2::zeros(bank.psi_pos.raw_dim());
        let mut grad_neg = Array2::zeros(bank.psi_neg.raw_dim());
        for _ in 0..cfg.groups_per_step {
            let gl = method_group_loss(predictor, &bank, backbone, spec, cfg, &mut rng)
                .map_err(|e| Error::Diverged { step, detail: e.to_string() })?;
            grad_pos.scaled_add(1.0 / groups, &gl.grad_pos);
            grad_neg.scaled_add(1.0 / groups, &gl.grad_neg);
            stats.merge(&gl.stats);
        }
        let lr = cfg.lr.lr_at(step);
        match cfg.method {
            Method::Agsm | Method::Bt => {
                let (gp, gn) = (grad_pos.as_slice().expect("layout"), grad_neg.as_slice().expect("layout"));
                let (pp, pn) = (&mut bank.psi_pos, &mut bank.psi_neg);
                opt.step(lr, &mut [pp.as_slice_mut().expect("layout"), pn.as_slice_mut().expect("layout")], &[gp, gn]);
            }
            Method::PositiveOnly | Method::Softrepa => {
                let gp = grad_pos.as_slice().expect("layout");
                opt.step(lr, &mut [bank.psi_pos.as_slice_mut().expect("layout")], &[gp]);
            }
            Method::SharedToken => {
                let total = &grad_pos + &grad_neg;
                opt.step(lr, &mut [bank.psi_pos.as_slice_mut().expect("layout")], &[total.as_slice().expect("layout")]);
            }
        }
        if cfg.method.shares_tokens() {
            bank.psi_neg.assign(&bank.psi_pos);
        }
        bank.ema_update(Polarity::Positive);
        bank.ema_update(Polarity::Negative);
        if bank.psi_pos.iter().chain(bank.psi_neg.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step, detail: "non-finite soft tokens".into() });
        }
        let val_alignment = validate(step, &bank);
        records.push(RunRecord {
            step,
            pos_loss: stats.pos_loss(),
            neg_loss: stats.neg_loss(),
            delta_norm: stats.mean_delta_norm(),
            pl_entropy: stats.mean_entropy(),
            val_alignment,
        });
    }
    Ok((bank, records))
}

/// Shuffled copy of `0..n`; used by callers that need a random condition order.
pub fn shuffled<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}
