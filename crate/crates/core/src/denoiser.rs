//! Conditional MLP predictor with a soft-token input.
//!
//! The network maps `[x ; time embedding ; condition embedding ; token summary]`
//! to a prediction of the same dimension as `x` (noise for diffusion
//! backbones, velocity for flow backbones). The token summary is the mean of
//! the rows of the token matrix, or zeros when no tokens are supplied. The
//! backbone is frozen during post-training; only the tokens move.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::optim::{AdamW, CosineRestarts};
use crate::rng::{self, Stream};
use crate::schedule::NoiseSchedule;

/// `m × d_s` matrix of soft tokens, one token per row.
pub type TokenMatrix = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub data_dim: usize,
    pub num_conditions: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub token_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
}

impl DenoiserConfig {
    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_dim + self.cond_dim + self.token_dim
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("data_dim", self.data_dim),
            ("num_conditions", self.num_conditions),
            ("cond_dim", self.cond_dim),
            ("token_dim", self.token_dim),
            ("hidden_width", self.hidden_width),
            ("hidden_layers", self.hidden_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument("time_dim must be a positive even number".into()));
        }
        Ok(())
    }
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            data_dim: 2,
            num_conditions: 8,
            time_dim: 16,
            cond_dim: 16,
            token_dim: 16,
            hidden_width: 128,
            hidden_layers: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cond {
    Label(usize),
    /// Unconditional input used by classifier-free guidance.
    Null,
}

/// One row of a batched evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub x: &'a [f64],
    /// Normalized time in `[0, 1]`.
    pub time: f64,
    pub cond: Cond,
}

impl<'a> Query<'a> {
    pub fn new(x: &'a [f64], time: f64, cond: Cond) -> Self {
        Query { x, time, cond }
    }
}

/// Anything that predicts from `(x, time, cond, tokens)` and can pull a
/// prediction cotangent back onto the tokens.
///
/// The group losses are written against this trait so that they can be
/// checked with hand-built mock predictors.
pub trait Predictor {
    fn output_dim(&self) -> usize;

    /// Row `r` of the result is the prediction for `queries[r]`.
    fn predict_batch(&self, queries: &[Query<'_>], tokens: Option<&TokenMatrix>) -> Result<Array2<f64>>;

    /// Gradient of `Σ_r ⟨upstream[r], prediction[r]⟩` with respect to `tokens`.
    fn token_vjp(
        &self,
        queries: &[Query<'_>],
        tokens: &TokenMatrix,
        upstream: ArrayView2<'_, f64>,
    ) -> Result<TokenMatrix>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out × in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let std = (1.0 / inputs as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let weight = Array2::from_shape_fn((outputs, inputs), |_| normal.sample(rng));
        Linear { weight, bias: Array1::zeros(outputs) }
    }

    fn apply(&self, input: &Array2<f64>) -> Array2<f64> {
        input.dot(&self.weight.t()) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    /// `hidden_layers + 1` affine maps; all but the last are followed by SiLU.
    pub layers: Vec<Linear>,
    /// `K × d_e`
    pub label_embed: Array2<f64>,
    pub null_embed: Array1<f64>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Sinusoidal features of `time ∈ [0, 1]` with frequencies from 1 to 1000.
pub fn time_embedding(time: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = if half > 1 { 1000f64.powf(k as f64 / (half - 1) as f64) } else { 1.0 };
        out[k] = (time * freq).sin();
        out[half + k] = (time * freq).cos();
    }
    out
}

struct Trace {
    /// Inputs to each layer; `acts[0]` is the assembled network input.
    acts: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
    out: Array2<f64>,
}

/// Parameter gradients, laid out like [`DenoiserParams`].
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub layers: Vec<Linear>,
    pub label_embed: Array2<f64>,
    pub null_embed: Array1<f64>,
}

impl DenoiserParams {
    pub fn init<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.hidden_layers + 1);
        let mut width_in = config.input_dim();
        for _ in 0..config.hidden_layers {
            layers.push(Linear::init(width_in, config.hidden_width, rng));
            width_in = config.hidden_width;
        }
        layers.push(Linear::init(width_in, config.data_dim, rng));
        let label_embed =
            Array2::from_shape_fn((config.num_conditions, config.cond_dim), |_| StandardNormal.sample(rng));
        let null_embed = Array1::from_shape_fn(config.cond_dim, |_| StandardNormal.sample(rng));
        Ok(DenoiserParams { config, layers, label_embed, null_embed })
    }

    fn check_tokens(&self, tokens: &TokenMatrix) -> Result<()> {
        if tokens.nrows() == 0 {
            return Err(Error::InvalidArgument("token matrix has no rows".into()));
        }
        check_dim(self.config.token_dim, tokens.ncols())
    }

    fn assemble(&self, queries: &[Query<'_>], tokens: Option<&TokenMatrix>) -> Result<Array2<f64>> {
        let c = &self.config;
        let summary = match tokens {
            Some(tok) => {
                self.check_tokens(tok)?;
                tok.mean_axis(Axis(0)).expect("nonempty token matrix")
            }
            None => Array1::zeros(c.token_dim),
        };
        let mut input = Array2::zeros((queries.len(), c.input_dim()));
        let (xo, to, co, so) = (0, c.data_dim, c.data_dim + c.time_dim, c.data_dim + c.time_dim + c.cond_dim);
        for (r, q) in queries.iter().enumerate() {
            check_dim(c.data_dim, q.x.len())?;
            let mut row = input.row_mut(r);
            for (k, &v) in q.x.iter().enumerate() {
                row[xo + k] = v;
            }
            for (k, v) in time_embedding(q.time, c.time_dim).into_iter().enumerate() {
                row[to + k] = v;
            }
            let emb = match q.cond {
                Cond::Label(id) if id < c.num_conditions => self.label_embed.row(id),
                Cond::Label(id) => return Err(Error::UnknownCondition { id, known: c.num_conditions }),
                Cond::Null => self.null_embed.view(),
            };
            row.slice_mut(s![co..so]).assign(&emb);
            row.slice_mut(s![so..]).assign(&summary);
        }
        Ok(input)
    }

    fn forward(&self, input: Array2<f64>) -> Trace {
        let hidden = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(hidden + 1);
        let mut pre = Vec::with_capacity(hidden);
        acts.push(input);
        for layer in &self.layers[..hidden] {
            let z = layer.apply(acts.last().expect("input present"));
            acts.push(z.mapv(silu));
            pre.push(z);
        }
        let out = self.layers[hidden].apply(acts.last().expect("input present"));
        Trace { acts, pre, out }
    }

    /// Gradient with respect to the assembled input.
    fn backward_input(&self, trace: &Trace, upstream: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut g = upstream.to_owned();
        for l in (0..self.layers.len()).rev() {
            let g_in = g.dot(&self.layers[l].weight);
            if l == 0 {
                return g_in;
            }
            g = g_in * trace.pre[l - 1].mapv(silu_grad);
        }
        unreachable!("at least one layer")
    }

    fn backward_params(&self, queries: &[Query<'_>], trace: &Trace, upstream: ArrayView2<'_, f64>) -> ParamGrads {
        let n_layers = self.layers.len();
        let mut grads: Vec<Linear> = Vec::with_capacity(n_layers);
        let mut g = upstream.to_owned();
        let mut g_input = None;
        for l in (0..n_layers).rev() {
            let weight = g.t().dot(&trace.acts[l]);
            let bias = g.sum_axis(Axis(0));
            let g_in = g.dot(&self.layers[l].weight);
            grads.push(Linear { weight, bias });
            if l == 0 {
                g_input = Some(g_in);
            } else {
                g = g_in * trace.pre[l - 1].mapv(silu_grad);
            }
        }
        grads.reverse();
        let g_input = g_input.expect("at least one layer");
        let c = &self.config;
        let co = c.data_dim + c.time_dim;
        let mut label_embed = Array2::zeros(self.label_embed.raw_dim());
        let mut null_embed = Array1::zeros(c.cond_dim);
        for (r, q) in queries.iter().enumerate() {
            let seg = g_input.slice(s![r, co..co + c.cond_dim]);
            match q.cond {
                Cond::Label(id) => {
                    let mut row = label_embed.row_mut(id);
                    row += &seg;
                }
                Cond::Null => null_embed += &seg,
            }
        }
        ParamGrads { layers: grads, label_embed, null_embed }
    }

    /// Prediction for a single input.
    pub fn predict(&self, x: &[f64], time: f64, cond: Cond, tokens: Option<&TokenMatrix>) -> Result<Vec<f64>> {
        let out = self.predict_batch(&[Query::new(x, time, cond)], tokens)?;
        Ok(out.row(0).to_vec())
    }

    /// Gradient of `⟨upstream, predict(x, time, cond, tokens)⟩` with respect
    /// to the token matrix. Every row of the result is identical because the
    /// tokens enter only through their mean.
    pub fn grad_wrt_tokens(
        &self,
        x: &[f64],
        time: f64,
        cond: Cond,
        tokens: &TokenMatrix,
        upstream: &[f64],
    ) -> Result<TokenMatrix> {
        check_dim(self.config.data_dim, upstream.len())?;
        let up = Array2::from_shape_vec((1, upstream.len()), upstream.to_vec()).expect("row shape");
        self.token_vjp(&[Query::new(x, time, cond)], tokens, up.view())
    }

    /// Parameter gradients of `Σ_r ⟨upstream[r], prediction[r]⟩` (no tokens).
    pub fn param_vjp(&self, queries: &[Query<'_>], upstream: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ParamGrads)> {
        let input = self.assemble(queries, None)?;
        let trace = self.forward(input);
        check_dim(trace.out.nrows(), upstream.nrows())?;
        check_dim(trace.out.ncols(), upstream.ncols())?;
        let grads = self.backward_params(queries, &trace, upstream);
        Ok((trace.out, grads))
    }

    /// Every parameter tensor, in a fixed order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.layers {
            out.push(layer.weight.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
        }
        out.push(self.label_embed.as_slice_mut().expect("standard layout"));
        out.push(self.null_embed.as_slice_mut().expect("standard layout"));
        out
    }

    /// Named tensors in the same order as [`DenoiserParams::tensors_mut`].
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.weight"), layer.weight.shape().to_vec(), layer.weight.as_slice().expect("standard layout")));
            out.push((format!("layer{i}.bias"), layer.bias.shape().to_vec(), layer.bias.as_slice().expect("standard layout")));
        }
        out.push(("label_embed".into(), self.label_embed.shape().to_vec(), self.label_embed.as_slice().expect("standard layout")));
        out.push(("null_embed".into(), self.null_embed.shape().to_vec(), self.null_embed.as_slice().expect("standard layout")));
        out
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (_, _, data) in self.named_tensors() {
            for v in data {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

impl ParamGrads {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for layer in &self.layers {
            out.push(layer.weight.as_slice().expect("standard layout"));
            out.push(layer.bias.as_slice().expect("standard layout"));
        }
        out.push(self.label_embed.as_slice().expect("standard layout"));
        out.push(self.null_embed.as_slice().expect("standard layout"));
        out
    }
}

impl Predictor for DenoiserParams {
    fn output_dim(&self) -> usize {
        self.config.data_dim
    }

    fn predict_batch(&self, queries: &[Query<'_>], tokens: Option<&TokenMatrix>) -> Result<Array2<f64>> {
        let input = self.assemble(queries, tokens)?;
        Ok(self.forward(input).out)
    }

    fn token_vjp(
        &self,
        queries: &[Query<'_>],
        tokens: &TokenMatrix,
        upstream: ArrayView2<'_, f64>,
    ) -> Result<TokenMatrix> {
        let input = self.assemble(queries, Some(tokens))?;
        check_dim(queries.len(), upstream.nrows())?;
        check_dim(self.config.data_dim, upstream.ncols())?;
        let trace = self.forward(input);
        let g_input = self.backward_input(&trace, upstream);
        let c = &self.config;
        let so = c.data_dim + c.time_dim + c.cond_dim;
        let g_summary = g_input.slice(s![.., so..]).sum_axis(Axis(0));
        let m = tokens.nrows();
        let per_token = g_summary / m as f64;
        let mut grad = Array2::zeros(tokens.raw_dim());
        for mut row in grad.rows_mut() {
            row.assign(&per_token);
        }
        Ok(grad)
    }
}

// --- soft tokens -------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Positive,
    Negative,
}

/// Positive and negative token matrices and their EMA shadows.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTokenBank {
    pub psi_pos: TokenMatrix,
    pub psi_neg: TokenMatrix,
    pub ema_pos: TokenMatrix,
    pub ema_neg: TokenMatrix,
    pub ema_decay: f64,
}

impl SoftTokenBank {
    /// Live tokens drawn i.i.d. `N(0, std²)`; EMA shadows start equal to them.
    pub fn init<R: Rng + ?Sized>(count: usize, dim: usize, std: f64, ema_decay: f64, rng: &mut R) -> Result<Self> {
        if count == 0 || dim == 0 {
            return Err(Error::InvalidArgument("token bank needs at least one token of positive dimension".into()));
        }
        if !(std >= 0.0 && std.is_finite()) {
            return Err(Error::InvalidArgument(format!("token init std {std} must be finite and >= 0")));
        }
        if !(0.0..=1.0).contains(&ema_decay) {
            return Err(Error::InvalidArgument(format!("ema decay {ema_decay} outside [0, 1]")));
        }
        let mut draw = || Array2::from_shape_fn((count, dim), |_| { let z: f64 = StandardNormal.sample(rng); std * z });
        let psi_pos: Array2<f64> = draw();
        let psi_neg: Array2<f64> = draw();
        Ok(SoftTokenBank {
            ema_pos: psi_pos.clone(),
            ema_neg: psi_neg.clone(),
            psi_pos,
            psi_neg,
            ema_decay,
        })
    }

    pub fn count(&self) -> usize {
        self.psi_pos.nrows()
    }

    pub fn dim(&self) -> usize {
        self.psi_pos.ncols()
    }

    pub fn live(&self, polarity: Polarity) -> &TokenMatrix {
        match polarity {
            Polarity::Positive => &self.psi_pos,
            Polarity::Negative => &self.psi_neg,
        }
    }

    pub fn live_mut(&mut self, polarity: Polarity) -> &mut TokenMatrix {
        match polarity {
            Polarity::Positive => &mut self.psi_pos,
            Polarity::Negative => &mut self.psi_neg,
        }
    }

    pub fn ema(&self, polarity: Polarity) -> &TokenMatrix {
        match polarity {
            Polarity::Positive => &self.ema_pos,
            Polarity::Negative => &self.ema_neg,
        }
    }

    /// `ema ← decay·ema + (1 − decay)·psi` for one polarity.
    pub fn ema_update(&mut self, polarity: Polarity) {
        let d = self.ema_decay;
        let (live, ema) = match polarity {
            Polarity::Positive => (&self.psi_pos, &mut self.ema_pos),
            Polarity::Negative => (&self.psi_neg, &mut self.ema_neg),
        };
        ema.zip_mut_with(live, |e, &p| *e = d * *e + (1.0 - d) * p);
    }
}

// --- pretraining -------------------------------------------------------------

/// What the backbone regresses onto.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    /// ε-prediction on discrete DDPM timesteps.
    Noise(&'a NoiseSchedule),
    /// Velocity `ε − x0` on the linear interpolant, `t ~ U(0, 1)`.
    Velocity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Probability of replacing the label by the null condition.
    pub cond_dropout: f64,
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { steps: 4000, lr: 2e-3, batch_size: 128, cond_dropout: 0.1, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub initial_heldout_loss: f64,
    pub final_heldout_loss: f64,
}

struct Example {
    x: Vec<f64>,
    time: f64,
    cond: Cond,
    target: Vec<f64>,
}

fn draw_example<R: Rng + ?Sized>(
    pair: &(Vec<f64>, usize),
    objective: Objective<'_>,
    cond_dropout: f64,
    rng: &mut R,
) -> Result<Example> {
    let (x0, label) = pair;
    let eps = rng::standard_normal_vec(rng, x0.len());
    let cond = if rng.random::<f64>() < cond_dropout { Cond::Null } else { Cond::Label(*label) };
    match objective {
        Objective::Noise(sched) => {
            let t = rng.random_range(1..=sched.timesteps());
            let x = sched.forward_noise(x0, t, &eps)?;
            Ok(Example { x, time: sched.time_fraction(t), cond, target: eps })
        }
        Objective::Velocity => {
            let t: f64 = rng.random();
            let x = x0.iter().zip(&eps).map(|(a, e)| (1.0 - t) * a + t * e).collect();
            let target = eps.iter().zip(x0).map(|(e, a)| e - a).collect();
            Ok(Example { x, time: t, cond, target })
        }
    }
}

fn batch_loss(params: &DenoiserParams, batch: &[Example]) -> Result<f64> {
    let queries: Vec<Query<'_>> = batch.iter().map(|e| Query::new(&e.x, e.time, e.cond)).collect();
    let out = params.predict_batch(&queries, None)?;
    let total: f64 = batch
        .iter()
        .enumerate()
        .map(|(r, e)| crate::sq_dist(out.row(r).as_slice().expect("row"), &e.target))
        .sum();
    Ok(total / batch.len() as f64)
}

/// Trains a backbone from scratch by plain denoising (or velocity) regression
/// with no tokens, then returns it for freezing.
///
/// The last tenth of `dataset` (at least one pair) is held out; a fixed batch
/// of noised held-out examples scores the model before and after training.
pub fn pretrain_backbone(
    dataset: &[(Vec<f64>, usize)],
    objective: Objective<'_>,
    model: DenoiserConfig,
    config: &PretrainConfig,
    seed: u64,
) -> Result<(DenoiserParams, PretrainReport)> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("pretraining dataset is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut init_rng = rng::substream(seed, Stream::Init);
    let mut params = DenoiserParams::init(model, &mut init_rng)?;

    let n_held = if dataset.len() >= 10 { dataset.len() / 10 } else { 0 };
    let (train, held) = dataset.split_at(dataset.len() - n_held);
    let held = if held.is_empty() { train } else { held };
    let mut eval_rng = rng::substream(seed, Stream::Eval);
    let heldout: Vec<Example> = (0..512)
        .map(|i| draw_example(&held[i % held.len()], objective, 0.0, &mut eval_rng))
        .collect::<Result<_>>()?;
    let initial = batch_loss(&params, &heldout)?;

    let mut rng = rng::substream(seed, Stream::Training);
    let mut opt = AdamW::new(config.weight_decay);
    let sched = CosineRestarts { base_lr: config.lr, min_lr: 0.0, period: config.steps.max(1), period_mult: 1 };
    for step in 0..config.steps {
        let batch: Vec<Example> = (0..config.batch_size)
            .map(|_| {
                let pair = &train[rng.random_range(0..train.len())];
                draw_example(pair, objective, config.cond_dropout, &mut rng)
            })
            .collect::<Result<_>>()?;
        let queries: Vec<Query<'_>> = batch.iter().map(|e| Query::new(&e.x, e.time, e.cond)).collect();
        let input = params.assemble(&queries, None)?;
        let trace = params.forward(input);
        let mut upstream = trace.out.clone();
        let scale = 2.0 / batch.len() as f64;
        let mut loss = 0.0;
        for (r, e) in batch.iter().enumerate() {
            for (k, t) in e.target.iter().enumerate() {
                let d = upstream[[r, k]] - t;
                loss += d * d;
                upstream[[r, k]] = scale * d;
            }
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { step, detail: format!("pretraining loss {loss}") });
        }
        let grads = params.backward_params(&queries, &trace, upstream.view());
        let g = grads.tensors();
        opt.step(sched.lr_at(step), &mut params.tensors_mut(), &g);
    }
    let final_loss = batch_loss(&params, &heldout)?;
    if !final_loss.is_finite() {
        return Err(Error::Diverged { step: config.steps, detail: format!("held-out loss {final_loss}") });
    }
    Ok((params, PretrainReport { initial_heldout_loss: initial, final_heldout_loss: final_loss }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> DenoiserConfig {
        DenoiserConfig {
            data_dim: 3,
            num_conditions: 4,
            time_dim: 6,
            cond_dim: 5,
            token_dim: 4,
            hidden_width: 9,
            hidden_layers: 3,
        }
    }

    fn small_params(seed: u64) -> DenoiserParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = DenoiserParams::init(small_config(), &mut rng).unwrap();
        // nonzero biases so the oracle exercises them
        for l in &mut p.layers {
            l.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        p
    }

    /// Straight-line forward pass over plain Vec arithmetic.
    fn oracle_forward(p: &DenoiserParams, x: &[f64], time: f64, cond: Cond, tokens: Option<&TokenMatrix>) -> Vec<f64> {
        let c = p.config;
        let mut input: Vec<f64> = x.to_vec();
        input.extend(time_embedding(time, c.time_dim));
        match cond {
            Cond::Label(k) => input.extend((0..c.cond_dim).map(|j| p.label_embed[[k, j]])),
            Cond::Null => input.extend(p.null_embed.iter().copied()),
        }
        for j in 0..c.token_dim {
            let v = match tokens {
                Some(t) => (0..t.nrows()).map(|r| t[[r, j]]).sum::<f64>() / t.nrows() as f64,
                None => 0.0,
            };
            input.push(v);
        }
        let mut h = input;
        for (li, layer) in p.layers.iter().enumerate() {
            let (rows, cols) = layer.weight.dim();
            let mut z = vec![0.0; rows];
            for r in 0..rows {
                let mut acc = layer.bias[r];
                for k in 0..cols {
                    acc += layer.weight[[r, k]] * h[k];
                }
                z[r] = acc;
            }
            h = if li + 1 < p.layers.len() { z.iter().map(|&v| v / (1.0 + (-v).exp())).collect() } else { z };
        }
        h
    }

    #[test]
    fn forward_matches_oracle() {
        let p = small_params(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tok = Array2::from_shape_fn((2, 4), |_| rng.random_range(-1.0..1.0));
        for (x, cond, tokens) in [
            (vec![0.0, 0.0, 0.0], Cond::Label(2), None),
            (vec![0.3, -1.2, 0.8], Cond::Null, Some(&tok)),
            (vec![1.0, 0.5, -0.5], Cond::Label(0), Some(&tok)),
        ] {
            let got = p.predict(&x, 0.37, cond, tokens).unwrap();
            let want = oracle_forward(&p, &x, 0.37, cond, tokens);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-12, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn none_tokens_equal_zero_tokens_and_deterministic() {
        let p = small_params(5);
        let x = [0.1, 0.2, 0.3];
        let zeros = Array2::zeros((4, 4));
        let a = p.predict(&x, 0.5, Cond::Label(1), None).unwrap();
        let b = p.predict(&x, 0.5, Cond::Label(1), Some(&zeros)).unwrap();
        let c = p.predict(&x, 0.5, Cond::Label(1), None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = small_params(5);
        assert!(matches!(
            p.predict(&[0.0; 3], 0.5, Cond::Label(4), None),
            Err(Error::UnknownCondition { id: 4, known: 4 })
        ));
        assert!(p.predict(&[0.0; 2], 0.5, Cond::Label(0), None).is_err());
        let wrong = Array2::zeros((2, 3));
        assert!(p.predict(&[0.0; 3], 0.5, Cond::Label(0), Some(&wrong)).is_err());
        let tok = Array2::zeros((2, 4));
        assert!(p.grad_wrt_tokens(&[0.0; 3], 0.5, Cond::Label(0), &tok, &[1.0; 2]).is_err());
    }

    #[test]
    fn null_condition_ignores_label_table() {
        let mut p = small_params(6);
        let x = [0.4, -0.4, 0.1];
        let before = p.predict(&x, 0.2, Cond::Null, None).unwrap();
        p.label_embed.fill(f64::NAN);
        let after = p.predict(&x, 0.2, Cond::Null, None).unwrap();
        assert_eq!(before, after);
    }

    fn fd_check(p: &DenoiserParams, rng: &mut ChaCha8Rng, m: usize) -> f64 {
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let tok = Array2::from_shape_fn((m, 4), |_| rng.random_range(-1.0..1.0));
        let up: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let time = rng.random_range(0.0..1.0);
        let cond = Cond::Label(rng.random_range(0..4));
        let g = p.grad_wrt_tokens(&x, time, cond, &tok, &up).unwrap();
        let f = |t: &TokenMatrix| -> f64 {
            let o = p.predict(&x, time, cond, Some(t)).unwrap();
            o.iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        let mut num = Array2::zeros(tok.raw_dim());
        for r in 0..m {
            for k in 0..4 {
                let mut tp = tok.clone();
                tp[[r, k]] += h;
                let mut tm = tok.clone();
                tm[[r, k]] -= h;
                num[[r, k]] = (f(&tp) - f(&tm)) / (2.0 * h);
            }
        }
        let diff = (&g - &num).mapv(|v| v * v).sum().sqrt();
        let scale = num.mapv(|v| v * v).sum().sqrt().max(g.mapv(|v| v * v).sum().sqrt()).max(1e-8);
        diff / scale
    }

    #[test]
    fn token_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for i in 0..20 {
            let p = small_params(100 + i);
            let rel = fd_check(&p, &mut rng, 1 + (i as usize % 4));
            assert!(rel <= 1e-4, "config {i}: relative error {rel}");
        }
    }

    #[test]
    fn token_gradient_rows_equal_and_zero_upstream() {
        let p = small_params(9);
        let tok = Array2::from_shape_fn((2, 4), |(r, k)| 0.1 * (r + k) as f64);
        let g = p.grad_wrt_tokens(&[0.2, 0.1, -0.3], 0.6, Cond::Label(3), &tok, &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(g.row(0), g.row(1));
        let z = p.grad_wrt_tokens(&[0.2, 0.1, -0.3], 0.6, Cond::Label(3), &tok, &[0.0; 3]).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn param_gradient_matches_finite_differences() {
        let mut p = small_params(12);
        let x = [0.5, -0.2, 0.9];
        let queries = [Query::new(&x, 0.3, Cond::Label(1)), Query::new(&x, 0.8, Cond::Null)];
        let up = Array2::from_shape_fn((2, 3), |(r, k)| 0.3 * r as f64 - 0.2 * k as f64 + 0.1);
        let (_, grads) = p.param_vjp(&queries, up.view()).unwrap();
        let obj = |p: &DenoiserParams| -> f64 { (p.predict_batch(&queries, None).unwrap() * &up).sum() };
        let h = 1e-6;
        let probes = [(0usize, 2usize, 3usize), (1, 4, 1), (3, 1, 5)];
        for (l, r, c) in probes {
            let orig = p.layers[l].weight[[r, c]];
            p.layers[l].weight[[r, c]] = orig + h;
            let fp = obj(&p);
            p.layers[l].weight[[r, c]] = orig - h;
            let fm = obj(&p);
            p.layers[l].weight[[r, c]] = orig;
            let num = (fp - fm) / (2.0 * h);
            assert!((num - grads.layers[l].weight[[r, c]]).abs() < 1e-6);
        }
        let orig = p.label_embed[[1, 2]];
        p.label_embed[[1, 2]] = orig + h;
        let fp = obj(&p);
        p.label_embed[[1, 2]] = orig - h;
        let fm = obj(&p);
        p.label_embed[[1, 2]] = orig;
        assert!(((fp - fm) / (2.0 * h) - grads.label_embed[[1, 2]]).abs() < 1e-6);
        let orig = p.null_embed[0];
        p.null_embed[0] = orig + h;
        let fp = obj(&p);
        p.null_embed[0] = orig - h;
        let fm = obj(&p);
        p.null_embed[0] = orig;
        assert!(((fp - fm) / (2.0 * h) - grads.null_embed[0]).abs() < 1e-6);
    }

    #[test]
    fn token_bank_init_and_ema() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let zero = SoftTokenBank::init(4, 3, 0.0, 0.9, &mut rng).unwrap();
        assert!(zero.psi_pos.iter().all(|v| *v == 0.0));
        assert_eq!(zero.ema_pos, zero.psi_pos);

        let a = SoftTokenBank::init(4, 16, 0.02, 0.999, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = SoftTokenBank::init(4, 16, 0.02, 0.999, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);

        let mut bank = SoftTokenBank::init(1, 1, 0.0, 0.5, &mut rng).unwrap();
        bank.ema_pos[[0, 0]] = 2.0;
        bank.psi_pos[[0, 0]] = 4.0;
        bank.ema_update(Polarity::Positive);
        assert_eq!(bank.ema_pos[[0, 0]], 3.0);
        assert_eq!(bank.psi_pos[[0, 0]], 4.0);
        bank.ema_decay = 1.0;
        bank.ema_update(Polarity::Positive);
        assert_eq!(bank.ema_pos[[0, 0]], 3.0);
        bank.ema_decay = 0.0;
        bank.ema_update(Polarity::Positive);
        assert_eq!(bank.ema_pos[[0, 0]], 4.0);

        assert!(SoftTokenBank::init(0, 3, 0.02, 0.9, &mut rng).is_err());
        assert!(SoftTokenBank::init(2, 3, -1.0, 0.9, &mut rng).is_err());
    }

    #[test]
    fn token_init_variance() {
        // 4 × 1250 × 2 polarities = 10⁴ entries
        let bank = SoftTokenBank::init(4, 1250, 0.02, 0.999, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
        let vals: Vec<f64> = bank.psi_pos.iter().chain(bank.psi_neg.iter()).copied().collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        let se = 4e-4 * (2.0 / n).sqrt();
        assert!((var - 4e-4).abs() < 3.0 * se, "variance {var}");
    }
}
