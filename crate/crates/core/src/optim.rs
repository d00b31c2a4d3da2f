//! AdamW with a cosine-annealing warm-restart learning-rate schedule.

use serde::{Deserialize, Serialize};

/// Decoupled-weight-decay Adam over a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    slots: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, slots: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every tensor in `params` with the matching `grads`.
    ///
    /// The tensor list must keep the same order and shapes across calls.
    pub fn step(&mut self, lr: f64, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), grads.len());
        if self.slots.is_empty() {
            self.slots = params.iter().map(|p| (vec![0.0; p.len()], vec![0.0; p.len()])).collect();
        }
        assert_eq!(self.slots.len(), params.len(), "tensor list changed between steps");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.slots.iter_mut()) {
            assert_eq!(p.len(), g.len());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p[i]);
            }
        }
    }
}

/// Cosine annealing with warm restarts every `period` steps (cycle length
/// multiplied by `period_mult` after each restart).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CosineRestarts {
    pub base_lr: f64,
    pub min_lr: f64,
    pub period: usize,
    pub period_mult: usize,
}

impl CosineRestarts {
    pub fn constant(lr: f64) -> Self {
        CosineRestarts { base_lr: lr, min_lr: lr, period: 1, period_mult: 1 }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.period == 0 {
            return self.base_lr;
        }
        let mut cur = step;
        let mut len = self.period;
        while cur >= len {
            cur -= len;
            len *= self.period_mult.max(1);
        }
        let frac = cur as f64 / len as f64;
        self.min_lr + (self.base_lr - self.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_restarts_shape() {
        let s = CosineRestarts { base_lr: 1.0, min_lr: 0.0, period: 10, period_mult: 1 };
        assert_eq!(s.lr_at(0), 1.0);
        assert!((s.lr_at(5) - 0.5).abs() < 1e-12);
        assert_eq!(s.lr_at(10), 1.0);
        assert!(s.lr_at(9) < 0.05);
        let m = CosineRestarts { period_mult: 2, ..s };
        assert_eq!(m.lr_at(30), 1.0);
        assert!((m.lr_at(20) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut opt = AdamW::new(0.0);
        let mut x = vec![3.0, -2.0];
        for _ in 0..2000 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.step(0.05, &mut [&mut x[..]], &[&g[..]]);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-3), "{x:?}");
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut opt = AdamW::new(1e-4);
        let mut x = vec![1.0, 2.0];
        opt.step(0.0, &mut [&mut x[..]], &[&[5.0, 5.0][..]]);
        assert_eq!(x, vec![1.0, 2.0]);
    }
}
