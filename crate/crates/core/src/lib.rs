//! Soft-token post-training for conditional diffusion and flow models.
//!
//! A frozen conditional denoiser is steered by two small banks of learnable
//! soft tokens. Positive tokens are fit to a target that is tilted toward
//! better-aligned conditions, negative tokens to a target tilted away from
//! them. The tilt comes from a Plackett–Luce softmax over implicit rewards
//! (negative scaled denoising errors) evaluated with EMA copies of the tokens,
//! so no external reward model is needed.
//!
//! Module map:
//!
//! | module | contents |
//! |--------|----------|
//! | [`schedule`] | DDPM constants and the reward/guidance scalings |
//! | [`denoiser`] | MLP noise/velocity predictor, token injection, token banks, pretraining |
//! | [`agsm`] | rewards, PL weights, guidance deltas, group losses, post-training loop |
//! | [`baselines`] | contrastive soft-token baseline and the positive-only variant |
//! | [`flow`] | linear-interpolant flow instantiation of the guided objective |
//! | [`sampling`] | ancestral DDPM and Euler flow samplers with token-aware CFG |
//! | [`data`] | synthetic conditional mixtures and group assembly |
//! | [`eval`] | alignment accuracy, energy distance, stability curves |

pub mod agsm;
pub mod baselines;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod flow;
pub mod optim;
pub mod rng;
pub mod sampling;
pub mod schedule;

pub use error::{Error, Result};

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}
