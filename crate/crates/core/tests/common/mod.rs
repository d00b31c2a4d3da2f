#![allow(dead_code)]

use agsm_core::agsm::{guidance_delta, pl_weights, GroupBatch, GuidanceConfig};
use agsm_core::flow::{FlowConfig, FlowGroup};
use std::collections::HashMap;

use agsm_core::denoiser::{Cond, DenoiserConfig, DenoiserParams, Predictor, Query, SoftTokenBank, TokenMatrix};
use agsm_core::schedule::NoiseSchedule;
use agsm_core::Result;
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_config(data_dim: usize, num_conditions: usize) -> DenoiserConfig {
    DenoiserConfig {
        data_dim,
        num_conditions,
        time_dim: 8,
        cond_dim: 6,
        token_dim: 5,
        hidden_width: 12,
        hidden_layers: 2,
    }
}

/// Small network plus a bank whose EMA shadows differ from the live tokens.
pub fn model(cfg: DenoiserConfig, seed: u64) -> (DenoiserParams, SoftTokenBank) {
    let mut r = rng(seed);
    let p = DenoiserParams::init(cfg, &mut r).unwrap();
    let mut bank = SoftTokenBank::init(3, cfg.token_dim, 0.5, 0.9, &mut r).unwrap();
    bank.ema_pos.mapv_inplace(|v| v + r.random_range(-0.3..0.3));
    bank.ema_neg.mapv_inplace(|v| v + r.random_range(-0.3..0.3));
    (p, bank)
}

pub fn normal_vec(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    agsm_core::rng::standard_normal_vec(r, n).into_iter().map(|v| v * scale).collect()
}

/// `g` distinct conditions out of `k`, random data, random `t`.
pub fn random_batch(r: &mut ChaCha8Rng, sched: &NoiseSchedule, g: usize, k: usize, dim: usize) -> GroupBatch {
    let mut conds: Vec<usize> = (0..k).collect();
    for i in 0..g {
        let j = r.random_range(i..k);
        conds.swap(i, j);
    }
    let pairs = conds[..g].iter().map(|&c| (normal_vec(r, dim, 2.0), c)).collect();
    let t = r.random_range(1..=sched.timesteps());
    let eps = normal_vec(r, dim, 1.0);
    GroupBatch::new(pairs, t, eps, sched).unwrap()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Relative error between two token gradients, in Frobenius norm.
pub fn rel_err(a: &TokenMatrix, b: &TokenMatrix) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let scale = a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` over every entry of `tokens`.
pub fn fd_grad(tokens: &TokenMatrix, h: f64, mut f: impl FnMut(&TokenMatrix) -> f64) -> TokenMatrix {
    let mut g = Array2::zeros(tokens.raw_dim());
    for idx in 0..tokens.len() {
        let (r, c) = (idx / tokens.ncols(), idx % tokens.ncols());
        let mut plus = tokens.clone();
        plus[[r, c]] += h;
        let mut minus = tokens.clone();
        minus[[r, c]] -= h;
        g[[r, c]] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    g
}

/// Single scalar prediction through the unbatched entry point.
pub fn p1(params: &DenoiserParams, x: f64, time: f64, c: usize, tokens: &TokenMatrix) -> f64 {
    params.predict(&[x], time, Cond::Label(c), Some(tokens)).unwrap()[0]
}

/// Optimal noise prediction for data `N(mean, std²·I)` under `sched`.
pub struct GaussianOracle {
    pub sched: NoiseSchedule,
    pub mean: Vec<f64>,
    pub std: f64,
}

impl Predictor for GaussianOracle {
    fn output_dim(&self) -> usize {
        self.mean.len()
    }

    fn predict_batch(&self, queries: &[Query<'_>], _tokens: Option<&TokenMatrix>) -> Result<Array2<f64>> {
        let t_max = self.sched.timesteps() as f64;
        let mut out = Array2::zeros((queries.len(), self.mean.len()));
        for (r, q) in queries.iter().enumerate() {
            let t = (q.time * t_max).round() as usize;
            let ab = self.sched.alpha_bar(t);
            let var = ab * self.std * self.std + 1.0 - ab;
            for k in 0..self.mean.len() {
                out[[r, k]] = (q.x[k] - ab.sqrt() * self.mean[k]) * (1.0 - ab).sqrt() / var;
            }
        }
        Ok(out)
    }

    fn token_vjp(&self, _: &[Query<'_>], tokens: &TokenMatrix, _: ArrayView2<'_, f64>) -> Result<TokenMatrix> {
        Ok(Array2::zeros(tokens.raw_dim()))
    }
}

/// Returns preset vectors keyed by the exact query state, condition and
/// token matrix (identified by its first entry).
pub struct Table {
    pub dim: usize,
    out: HashMap<(Vec<u64>, usize, u64), Vec<f64>>,
}

impl Table {
    pub fn new(dim: usize) -> Self {
        Table { dim, out: HashMap::new() }
    }

    fn key(x: &[f64], c: usize, tokens: &TokenMatrix) -> (Vec<u64>, usize, u64) {
        (x.iter().map(|v| v.to_bits()).collect(), c, tokens[[0, 0]].to_bits())
    }

    pub fn set(&mut self, x: &[f64], c: usize, tokens: &TokenMatrix, v: Vec<f64>) {
        self.out.insert(Self::key(x, c, tokens), v);
    }
}

impl Predictor for Table {
    fn output_dim(&self) -> usize {
        self.dim
    }

    fn predict_batch(&self, queries: &[Query<'_>], tokens: Option<&TokenMatrix>) -> Result<Array2<f64>> {
        let tokens = tokens.expect("tokens");
        let mut out = Array2::zeros((queries.len(), self.dim));
        for (r, q) in queries.iter().enumerate() {
            let Cond::Label(c) = q.cond else { panic!("unconditional query") };
            let v = &self.out[&Self::key(q.x, c, tokens)];
            out.row_mut(r).assign(&ndarray::ArrayView1::from(&v[..]));
        }
        Ok(out)
    }

    fn token_vjp(&self, _: &[Query<'_>], tokens: &TokenMatrix, _: ArrayView2<'_, f64>) -> Result<TokenMatrix> {
        Ok(Array2::zeros(tokens.raw_dim()))
    }
}

/// Straight-line G=2, d=1 evaluation of the guided objective.
#[allow(clippy::too_many_arguments)]
pub fn oracle_g2(
    p: &DenoiserParams,
    bank: &SoftTokenBank,
    s: &NoiseSchedule,
    b: &GroupBatch,
    gp: f64,
    gn: f64,
    diagonal_only: bool,
) -> f64 {
    let time = b.t as f64 / s.timesteps() as f64;
    let ab = s.alpha_bar(b.t);
    let ab_prev = s.alpha_bar(b.t - 1);
    // calibrated: A = lambda·beta/(alpha(1 - ab_prev)) with lambda making A·sqrt(1-ab) = 1
    let a_coef = 1.0 / (1.0 - ab).sqrt();
    let _ = ab_prev;
    let eps = b.eps[0];
    let mut loss = 0.0;
    let mut n = 0.0;
    for i in 0..2 {
        let mut e = [0.0; 2];
        let mut r = [0.0; 2];
        for j in 0..2 {
            let tok = if i == j { &bank.ema_pos } else { &bank.ema_neg };
            e[j] = p1(p, b.x_t[i][0], time, b.cond[j], tok);
            r[j] = -0.5 * a_coef * (e[j] - eps) * (e[j] - eps);
        }
        let w0 = 1.0 / (1.0 + (r[1] - r[0]).exp());
        let w = [w0, 1.0 - w0];
        let mean = w[0] * e[0] + w[1] * e[1];
        for j in 0..2 {
            if diagonal_only && i != j {
                continue;
            }
            let delta = e[j] - mean;
            let tok = if i == j { &bank.psi_pos } else { &bank.psi_neg };
            let pred = p1(p, b.x_t[i][0], time, b.cond[j], tok);
            let target = if i == j { eps + gp * delta } else { eps - gn * delta };
            loss += (pred - target) * (pred - target);
            n += 1.0;
        }
    }
    loss / n
}

/// Straight-line G=2, d=1 evaluation of the guided flow objective.
pub fn oracle_g2_flow(p: &DenoiserParams, bank: &SoftTokenBank, cfg: &FlowConfig, b: &FlowGroup, g: &GuidanceConfig) -> f64 {
    let (t, eps) = (b.t, b.eps[0]);
    let mut want = 0.0;
    for i in 0..2 {
        let x0 = b.x0[i][0];
        let xt = (1.0 - t) * x0 + t * eps;
        let xn = (1.0 - t - cfg.delta_step) * x0 + (t + cfg.delta_step) * eps;
        let mut v = [0.0; 2];
        let mut rw = [0.0; 2];
        for j in 0..2 {
            let tok = if i == j { &bank.ema_pos } else { &bank.ema_neg };
            v[j] = p1(&p, xn, t + cfg.delta_step, b.cond[j], tok);
            let mu = xn - cfg.delta_step * v[j];
            rw[j] = -cfg.lambda / (2.0 * cfg.sigma2) * (xt - mu) * (xt - mu);
        }
        let w0 = 1.0 / (1.0 + (rw[1] - rw[0]).exp());
        let mean = w0 * v[0] + (1.0 - w0) * v[1];
        for j in 0..2 {
            let tok = if i == j { &bank.psi_pos } else { &bank.psi_neg };
            let pred = p1(&p, xt, t, b.cond[j], tok);
            let u = eps - x0;
            let d = v[j] - mean;
            let target = if i == j { u + g.gamma_pos * cfg.b_scale * d } else { u - g.gamma_neg * cfg.b_scale * d };
            want += (pred - target) * (pred - target);
        }
    }
    want / 4.0
}

/// Three candidates with quadratic rewards `−(a/2)‖x − μ_k‖²`, so that
/// `p(z=1 | x, c) = softmax(r)[c]` is exact. The guided correction on the
/// negative side points along `−∇ log p(z=1)`, the consistent one along
/// `∇ log p(z=0) = ∇ log(1 − p)`; both must be positive multiples of `−∇p`.
/// Returns the cosine between the two directions at one random point.
pub fn collinearity_cos(r: &mut ChaCha8Rng, gamma_neg: f64) -> f64 {
    let a = r.random_range(0.2..3.0);
    let mu: Vec<Vec<f64>> = (0..3).map(|_| normal_vec(r, 2, 2.0)).collect();
    let x = normal_vec(r, 2, 2.0);
    let c = r.random_range(0..3);
    // log(1 − p) = −softplus(z) with z = r_c − logsumexp over the others,
    // evaluated so that tiny p keeps full relative precision
    let log_rest = |x: &[f64]| {
        let r: Vec<f64> = mu.iter().map(|m| -0.5 * a * sq(x, m)).collect();
        let rest: Vec<f64> = (0..3).filter(|&k| k != c).map(|k| r[k]).collect();
        let m = rest.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z = r[c] - (m + rest.iter().map(|v| (v - m).exp()).sum::<f64>().ln());
        if z < 0.0 {
            -z.exp().ln_1p()
        } else {
            -(z + (-z).exp().ln_1p())
        }
    };
    // ∇_x log p_c = a·(μ_c − Σ_k w_k μ_k) = a·Δ_c with the centers as predictions
    let rewards: Vec<f64> = mu.iter().map(|m| -0.5 * a * sq(&x, m)).collect();
    let w = pl_weights(&rewards).unwrap();
    let surrogate: Vec<f64> = guidance_delta(&mu, &w, c).unwrap().iter().map(|d| -gamma_neg * a * d).collect();
    let h = 1e-5;
    let consistent: Vec<f64> = (0..2)
        .map(|k| {
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            (log_rest(&xp) - log_rest(&xm)) / (2.0 * h)
        })
        .collect();
    let dot: f64 = surrogate.iter().zip(&consistent).map(|(u, v)| u * v).sum();
    dot / (norm(&surrogate) * norm(&consistent))
}

/// Dyadic value with few mantissa bits so interpolation is exact.
pub fn dyadic(r: &mut ChaCha8Rng) -> f64 {
    r.random_range(-64i32..64) as f64 / 16.0
}

/// Flow and diffusion evaluations of one random group whose mock
/// predictors are related by the velocity-to-noise substitution.
pub struct Substitution {
    pub flow_loss: f64,
    pub diffusion_loss: f64,
    /// Largest absolute PL weight difference.
    pub weight_gap: f64,
    /// Largest reward difference relative to `max(|r|, 1)`.
    pub reward_gap: f64,
    /// Whether `x_{t+Δ} − x_t = Δ·u` held exactly for every row.
    pub exact_step: bool,
}

/// Builds a flow group at a dyadic time with `λ = A_t·σ²/Δ²` and `B = 1`,
/// and a diffusion group sharing its data and noise, then presets the
/// diffusion mock to `v + (ε − u_i)` for every flow velocity `v`.
pub fn substitution_instance(r: &mut ChaCha8Rng, sched: &NoiseSchedule) -> Substitution {
    use agsm_core::agsm::{agsm_group_loss, agsm_pl_table};
    use agsm_core::flow::{flow_agsm_group_loss, flow_pl_table};

    let mut bk = SoftTokenBank::init(1, 1, 0.0, 0.5, &mut rng(0)).unwrap();
    bk.psi_pos.fill(1.0);
    bk.psi_neg.fill(2.0);
    bk.ema_pos.fill(3.0);
    bk.ema_neg.fill(4.0);
    let g = r.random_range(1..=5);
    let dim = r.random_range(1..=3);
    let t = r.random_range(1..=sched.timesteps());
    let delta_step = 1.0 / 64.0;
    let sigma2 = 1.0;
    let fc = FlowConfig { delta_step, sigma2, lambda: sched.reward_coef(t) * sigma2 / (delta_step * delta_step), b_scale: 1.0 };
    let tf = r.random_range(0..63) as f64 / 64.0;
    let eps: Vec<f64> = (0..dim).map(|_| dyadic(r)).collect();
    // the first coordinate keeps rows apart so every query key is unique
    let pairs: Vec<(Vec<f64>, usize)> = (0..g)
        .map(|i| ((0..dim).map(|k| dyadic(r) + if k == 0 { 8.0 * i as f64 } else { 0.0 }).collect(), i))
        .collect();
    let flow = FlowGroup::new(pairs.clone(), tf, eps.clone(), &fc).unwrap();
    let diff = GroupBatch::new(pairs, t, eps.clone(), sched).unwrap();
    let u = flow.target_velocities();
    let exact_step = (0..g).all(|i| (0..dim).all(|k| flow.x_next[i][k] - flow.x_t[i][k] == delta_step * u[i][k]));

    let mut fp = Table::new(dim);
    let mut dp = Table::new(dim);
    for i in 0..g {
        let shift: Vec<f64> = eps.iter().zip(&u[i]).map(|(e, v)| e - v).collect();
        let to_noise = |v: &[f64]| v.iter().zip(&shift).map(|(a, b)| a + b).collect::<Vec<f64>>();
        for j in 0..g {
            let (live, ema) = if i == j { (&bk.psi_pos, &bk.ema_pos) } else { (&bk.psi_neg, &bk.ema_neg) };
            let v_live: Vec<f64> = (0..dim).map(|_| dyadic(r)).collect();
            let v_ema: Vec<f64> = (0..dim).map(|_| dyadic(r)).collect();
            fp.set(&flow.x_t[i], j, live, v_live.clone());
            fp.set(&flow.x_next[i], j, ema, v_ema.clone());
            dp.set(&diff.x_t[i], j, live, to_noise(&v_live));
            dp.set(&diff.x_t[i], j, ema, to_noise(&v_ema));
        }
    }
    let gc = GuidanceConfig::new(r.random_range(0.0..2.0), r.random_range(0.0..2.0));
    let flow_loss = flow_agsm_group_loss(&fp, &bk, &fc, &flow, &gc).unwrap().loss;
    let diffusion_loss = agsm_group_loss(&dp, &bk, sched, &diff, &gc).unwrap().loss;
    let tf_ = flow_pl_table(&fp, &bk, &fc, &flow, &gc).unwrap();
    let td = agsm_pl_table(&dp, &bk, sched, &diff, &gc).unwrap();
    let (mut weight_gap, mut reward_gap) = (0.0f64, 0.0f64);
    for i in 0..g {
        for j in 0..g {
            weight_gap = weight_gap.max((tf_.weights[i][j] - td.weights[i][j]).abs());
            reward_gap = reward_gap.max((tf_.rewards[i][j] - td.rewards[i][j]).abs() / td.rewards[i][j].abs().max(1.0));
        }
    }
    Substitution { flow_loss, diffusion_loss, weight_gap, reward_gap, exact_step }
}
