//! Toy-scale metrics: nearest-mode alignment, energy distance and the
//! windowed stability curve.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agsm::RunRecord;
use crate::data::MixtureSpec;
use crate::error::{check_dim, Error, Result};

/// Index of the nearest center, which is the equal-prior Gaussian posterior
/// argmax when all modes share one isotropic std.
pub fn classify(x: &[f64], spec: &MixtureSpec) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, c) in spec.centers.iter().enumerate() {
        let d = crate::sq_dist(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// Fraction of samples whose nearest center is their own condition.
pub fn alignment_accuracy(samples: &[(Vec<f64>, usize)], spec: &MixtureSpec) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples to score".into()));
    }
    let mut hits = 0usize;
    for (x, c) in samples {
        check_dim(spec.dim, x.len())?;
        if *c >= spec.num_conditions() {
            return Err(Error::UnknownCondition { id: *c, known: spec.num_conditions() });
        }
        if classify(x, spec) == *c {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

fn mean_pair_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for x in a {
        for y in b {
            s += crate::sq_dist(x, y).sqrt();
        }
    }
    s / (a.len() * b.len()) as f64
}

/// `2·E‖a − b‖ − E‖a − a′‖ − E‖b − b′‖` over all pairs (V-statistic).
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("energy distance needs two non-empty sets".into()));
    }
    for x in a.iter().chain(b) {
        check_dim(a[0].len(), x.len())?;
    }
    let e = 2.0 * mean_pair_distance(a, b) - mean_pair_distance(a, a) - mean_pair_distance(b, b);
    Ok(e.max(0.0))
}

/// Energy distance of each condition's samples against `reference` fresh
/// draws from that condition's true mode. Conditions without samples get `None`.
pub fn per_condition_energy<R: Rng + ?Sized>(
    samples: &[(Vec<f64>, usize)],
    spec: &MixtureSpec,
    reference: usize,
    rng: &mut R,
) -> Result<Vec<Option<f64>>> {
    let mut out = Vec::with_capacity(spec.num_conditions());
    for k in 0..spec.num_conditions() {
        let mine: Vec<Vec<f64>> = samples.iter().filter(|s| s.1 == k).map(|s| s.0.clone()).collect();
        let truth: Vec<Vec<f64>> = (0..reference).map(|_| spec.sample_mode(k, rng)).collect();
        out.push(if mine.is_empty() { None } else { Some(energy_distance(&mine, &truth)?) });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityPoint {
    /// Last step of the window.
    pub step: usize,
    pub pos_loss: f64,
    pub neg_loss: f64,
    pub ratio_to_baseline: f64,
}

/// Means over consecutive non-overlapping windows of `window` records; a
/// trailing partial window is dropped. The ratio is against the first window.
pub fn stability_curve(records: &[RunRecord], window: usize) -> Result<Vec<StabilityPoint>> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records".into()));
    }
    if window == 0 || window > records.len() {
        return Err(Error::InvalidArgument(format!("window {window} does not fit {} records", records.len())));
    }
    let mut out: Vec<StabilityPoint> = Vec::with_capacity(records.len() / window);
    for chunk in records.chunks_exact(window) {
        let n = window as f64;
        let pos = chunk.iter().map(|r| r.pos_loss).sum::<f64>() / n;
        let neg = chunk.iter().map(|r| r.neg_loss).sum::<f64>() / n;
        let base = out.first().map(|p| p.neg_loss).unwrap_or(neg);
        out.push(StabilityPoint {
            step: chunk[window - 1].step,
            pos_loss: pos,
            neg_loss: neg,
            ratio_to_baseline: neg / base,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: usize, neg: f64) -> RunRecord {
        RunRecord { step, pos_loss: 1.0, neg_loss: neg, delta_norm: 0.0, pl_entropy: 0.0, val_alignment: None }
    }

    #[test]
    fn alignment_examples() {
        let spec = MixtureSpec::ring(8, 2, 4.0, 0.3).unwrap();
        let at: Vec<_> = (0..8).map(|k| (spec.centers[k].clone(), k)).collect();
        assert_eq!(alignment_accuracy(&at, &spec).unwrap(), 1.0);
        let shifted: Vec<_> = (0..8).map(|k| (spec.centers[k].clone(), (k + 1) % 8)).collect();
        assert_eq!(alignment_accuracy(&shifted, &spec).unwrap(), 0.0);
        assert!(alignment_accuracy(&[], &spec).is_err());
        assert!(alignment_accuracy(&[(vec![0.0, 0.0], 9)], &spec).is_err());
    }

    #[test]
    fn energy_examples() {
        let a = vec![vec![0.0], vec![0.0]];
        let b = vec![vec![1.0]];
        assert_eq!(energy_distance(&a, &b).unwrap(), 2.0);
        assert_eq!(energy_distance(&a, &a).unwrap(), 0.0);
        let c = vec![vec![0.5, 1.0], vec![-2.0, 0.0], vec![1.0, 1.0]];
        let d = vec![vec![0.0, 0.3], vec![4.0, 1.0]];
        assert!((energy_distance(&c, &d).unwrap() - energy_distance(&d, &c).unwrap()).abs() < 1e-14);
        assert!(energy_distance(&[], &d).is_err());
    }

    #[test]
    fn stability_examples() {
        let flat: Vec<_> = (0..100).map(|s| rec(s, 2.5)).collect();
        assert!(stability_curve(&flat, 10).unwrap().iter().all(|p| p.ratio_to_baseline == 1.0));
        let lin: Vec<_> = (0..1000).map(|s| rec(s, 1.0 + s as f64 / 999.0)).collect();
        let c = stability_curve(&lin, 1).unwrap();
        assert_eq!(c.len(), 1000);
        assert!((c.last().unwrap().ratio_to_baseline - 2.0).abs() < 1e-12);
        for (p, r) in c.iter().zip(&lin) {
            assert_eq!((p.step, p.neg_loss), (r.step, r.neg_loss));
        }
        let c = stability_curve(&lin, 10).unwrap();
        assert!((c.last().unwrap().ratio_to_baseline - 2.0).abs() < 0.02);
        assert!(stability_curve(&lin, 1001).is_err());
        assert!(stability_curve(&[], 1).is_err());
    }
}
