//! Synthetic conditional data and group assembly.
//!
//! Each condition id owns an isotropic Gaussian mode. A training group takes
//! `G` distinct conditions, one data point per condition, and noises every
//! point with one shared timestep and one shared noise vector.

use std::collections::HashSet;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agsm::GroupBatch;
use crate::error::{check_dim, Error, Result};
use crate::rng::standard_normal_vec;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub dim: usize,
    pub centers: Vec<Vec<f64>>,
    pub mode_std: f64,
}

impl MixtureSpec {
    /// `k` modes evenly spaced on a circle of radius `radius` in the first two
    /// coordinates; remaining coordinates are zero.
    pub fn ring(k: usize, dim: usize, radius: f64, mode_std: f64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidArgument("ring spec needs dim >= 2".into()));
        }
        let centers = (0..k)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
                let mut c = vec![0.0; dim];
                c[0] = radius * a.cos();
                c[1] = radius * a.sin();
                c
            })
            .collect();
        let spec = MixtureSpec { dim, centers, mode_std };
        spec.validate()?;
        Ok(spec)
    }

    pub fn num_conditions(&self) -> usize {
        self.centers.len()
    }

    pub fn min_center_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.centers.len() {
            for j in i + 1..self.centers.len() {
                best = best.min(crate::sq_dist(&self.centers[i], &self.centers[j]).sqrt());
            }
        }
        best
    }

    /// Centers distinct and modes separable (`mode_std` below half the
    /// closest center distance).
    pub fn validate(&self) -> Result<()> {
        if self.centers.is_empty() {
            return Err(Error::InvalidArgument("mixture needs at least one mode".into()));
        }
        for c in &self.centers {
            check_dim(self.dim, c.len())?;
        }
        if !(self.mode_std > 0.0 && self.mode_std.is_finite()) {
            return Err(Error::InvalidArgument(format!("mode_std {} must be positive", self.mode_std)));
        }
        if self.centers.len() > 1 {
            let d = self.min_center_distance();
            if d == 0.0 {
                return Err(Error::InvalidArgument("mixture centers must be distinct".into()));
            }
            if self.mode_std >= 0.5 * d {
                return Err(Error::InvalidArgument(format!(
                    "mode_std {} not below half the minimum center distance {d}",
                    self.mode_std
                )));
            }
        }
        Ok(())
    }

    pub fn sample_mode<R: Rng + ?Sized>(&self, cond: usize, rng: &mut R) -> Vec<f64> {
        let noise = standard_normal_vec(rng, self.dim);
        self.centers[cond].iter().zip(noise).map(|(c, z)| c + self.mode_std * z).collect()
    }
}

/// `n` pairs `(x0, c)` with `c` uniform over the conditions.
pub fn sample_pairs<R: Rng + ?Sized>(spec: &MixtureSpec, n: usize, rng: &mut R) -> Vec<(Vec<f64>, usize)> {
    (0..n)
        .map(|_| {
            let c = rng.random_range(0..spec.num_conditions());
            (spec.sample_mode(c, rng), c)
        })
        .collect()
}

/// Relabels each pair with probability `rate` to the preceding condition
/// (cyclically), producing a backbone training set with imperfect alignment.
pub fn shift_labels<R: Rng + ?Sized>(pairs: &mut [(Vec<f64>, usize)], rate: f64, k: usize, rng: &mut R) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("label noise rate {rate} outside [0, 1]")));
    }
    for (_, c) in pairs.iter_mut() {
        if *c >= k {
            return Err(Error::UnknownCondition { id: *c, known: k });
        }
        if rng.random::<f64>() < rate {
            *c = (*c + k - 1) % k;
        }
    }
    Ok(())
}

/// `g` pairs with distinct conditions.
pub fn sample_distinct_pairs<R: Rng + ?Sized>(
    spec: &MixtureSpec,
    g: usize,
    rng: &mut R,
) -> Result<Vec<(Vec<f64>, usize)>> {
    let k = spec.num_conditions();
    if g == 0 || g > k {
        return Err(Error::InvalidArgument(format!("group size {g} needs 1..={k} distinct conditions")));
    }
    let mut conds = sample_indices(rng, k, g).into_vec();
    conds.sort_unstable();
    Ok(conds.into_iter().map(|c| (spec.sample_mode(c, rng), c)).collect())
}

pub(crate) fn check_distinct(conds: &[usize]) -> Result<()> {
    let mut seen = HashSet::with_capacity(conds.len());
    for c in conds {
        if !seen.insert(c) {
            return Err(Error::InvalidArgument(format!("condition {c} appears twice in one group")));
        }
    }
    Ok(())
}

/// Noises every pair with one shared timestep and one shared noise vector.
pub fn build_group<R: Rng + ?Sized>(
    pairs: Vec<(Vec<f64>, usize)>,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<GroupBatch> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("group needs at least one pair".into()));
    }
    let t = rng.random_range(sched.min_train_timestep()..=sched.timesteps());
    let dim = pairs[0].0.len();
    let eps = standard_normal_vec(rng, dim);
    GroupBatch::new(pairs, t, eps, sched)
}
