//! Multi-seed experiment drivers. Each writes its per-run CSVs, a metrics
//! table and a `summary.json` into a report directory.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::path::{Path, PathBuf};

use agsm_core::agsm::{GuidanceConfig, Method, RunRecord};
use agsm_core::denoiser::SoftTokenBank;
use agsm_core::eval::stability_curve;
use agsm_core::sampling::Strategy;

use crate::checkpoint::Checkpoint;
use crate::commands::{backbone, balanced_conditions, ensure_dir, evaluate, output_root, run_posttrain, sample_chains, Metrics};
use crate::config::{Config, ModelKind};
use crate::error::{CliError, Result};
use crate::logs::{write_json, write_run_csv, Summary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Experiment {
    Stability,
    GammaSweep,
    BtVsPl,
    SamplingAblation,
    TrainingStrategy,
    BatchSize,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::Stability,
        Experiment::GammaSweep,
        Experiment::BtVsPl,
        Experiment::SamplingAblation,
        Experiment::TrainingStrategy,
        Experiment::BatchSize,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Stability => "stability",
            Experiment::GammaSweep => "gamma-sweep",
            Experiment::BtVsPl => "bt-vs-pl",
            Experiment::SamplingAblation => "sampling-ablation",
            Experiment::TrainingStrategy => "training-strategy",
            Experiment::BatchSize => "batch-size",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|e| e.name() == s).ok_or_else(|| CliError::UnknownName {
            kind: "experiment",
            name: s.into(),
            expected: Self::ALL.map(|e| e.name()).join(", "),
        })
    }
}

/// Negative-guidance strengths of the gamma sweep, at unit positive strength.
pub const GAMMA_NEG_SWEEP: [f64; 5] = [0.0, 0.05, 0.1, 0.5, 1.0];
/// Group sizes of the batch-size experiment; the step holds 16 pairs each time.
pub const GROUP_SIZES: [usize; 3] = [2, 4, 8];
const PAIRS_PER_STEP: usize = 16;

/// Frozen backbones by model kind and seed, shared across experiments.
#[derive(Default)]
pub struct BackboneCache(HashMap<(ModelKind, u64), Checkpoint>);

impl BackboneCache {
    pub fn get(&mut self, cfg: &Config, seed: u64) -> Result<&Checkpoint> {
        Ok(match self.0.entry((cfg.model.kind, seed)) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => e.insert(backbone(cfg, cfg.model.kind, seed)?),
        })
    }
}

/// The report directory, its metrics table and the summary under way.
struct Report {
    dir: PathBuf,
    rows: Vec<String>,
    summary: Summary,
}

impl Report {
    fn new(exp: Experiment, dir: &Path, seeds: &[u64]) -> Result<Self> {
        ensure_dir(&dir.join("runs"))?;
        Ok(Report {
            dir: dir.into(),
            rows: vec!["variant,seed,strategy,alignment_accuracy,mean_energy_distance".into()],
            summary: Summary::new(exp.name(), seeds),
        })
    }

    fn run_log(&self, variant: &str, seed: u64, records: &[RunRecord]) -> Result<()> {
        write_run_csv(&self.dir.join("runs").join(format!("{variant}-seed{seed}.csv")), records)
    }

    fn row(&mut self, variant: &str, seed: u64, strategy: Strategy, m: &Metrics) {
        self.rows.push(format!(
            "{variant},{seed},{},{},{}",
            strategy.name(),
            m.alignment_accuracy,
            m.mean_energy_distance
        ));
    }

    fn finish(self) -> Result<Summary> {
        let path = self.dir.join("metrics.csv");
        std::fs::write(&path, self.rows.join("\n") + "\n").map_err(crate::error::io(&path))?;
        write_json(&self.dir.join("summary.json"), &self.summary)?;
        Ok(self.summary)
    }
}

fn first_seeds(cfg: &Config, n: usize) -> Vec<u64> {
    cfg.train.seeds.iter().copied().take(n).collect()
}

/// Samples `per_condition` chains per condition under `strategy` and scores them.
pub fn score(cfg: &Config, ck: &Checkpoint, bank: Option<&SoftTokenBank>, strategy: Strategy, seed: u64) -> Result<Metrics> {
    let spec = cfg.data.spec()?;
    let conds = balanced_conditions(&spec, cfg.sample.per_condition);
    let xs = sample_chains(ck, bank, &conds, cfg.sample.scale, strategy, cfg.sample.flow_steps, seed)?;
    let samples: Vec<_> = xs.into_iter().zip(conds).collect();
    evaluate(&samples, &spec, cfg.sample.reference, seed)
}

fn finite_run(records: &[RunRecord], method: Method) -> bool {
    records.iter().all(|r| {
        r.pos_loss.is_finite()
            && r.delta_norm.is_finite()
            && r.pl_entropy.is_finite()
            && (method == Method::PositiveOnly || r.neg_loss.is_finite())
    })
}

fn fmt(values: &[f64]) -> String {
    let v: Vec<String> = values.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", v.join(", "))
}

/// Runs `exp` and writes its report into `dir`.
pub fn run_experiment(exp: Experiment, cfg: &Config, dir: &Path, cache: &mut BackboneCache) -> Result<Summary> {
    cfg.validate()?;
    match exp {
        Experiment::Stability => stability(cfg, dir, cache),
        Experiment::GammaSweep => gamma_sweep(cfg, dir, cache),
        Experiment::BtVsPl => compare_methods(exp, cfg, dir, cache, &[Method::Agsm, Method::Bt]),
        Experiment::SamplingAblation => sampling_ablation(cfg, dir, cache),
        Experiment::TrainingStrategy => {
            compare_methods(exp, cfg, dir, cache, &[Method::PositiveOnly, Method::SharedToken, Method::Agsm])
        }
        Experiment::BatchSize => batch_size(cfg, dir, cache),
    }
}

pub fn cmd_experiment(name: &str, config: Option<&Path>, out: Option<PathBuf>) -> Result<(Summary, PathBuf)> {
    let exp = Experiment::parse(name)?;
    let cfg = crate::commands::load_config(config)?;
    let dir = out.unwrap_or_else(|| output_root().join("experiments").join(exp.name()));
    let summary = run_experiment(exp, &cfg, &dir, &mut BackboneCache::default())?;
    Ok((summary, dir))
}

/// Final-window negative-error ratios of SoftREPA and AGSM over three seeds.
fn stability(cfg: &Config, dir: &Path, cache: &mut BackboneCache) -> Result<Summary> {
    let seeds = first_seeds(cfg, 3);
    let mut rep = Report::new(Experiment::Stability, dir, &seeds)?;
    let mut curves = vec!["method,seed,step,pos_loss,neg_loss,ratio_to_baseline".to_string()];
    let mut finals: HashMap<Method, Vec<f64>> = HashMap::new();
    for &seed in &seeds {
        let ck = cache.get(cfg, seed)?;
        for method in [Method::Softrepa, Method::Agsm] {
            let (_, records) = run_posttrain(cfg, ck, method, seed)?;
            rep.run_log(method.name(), seed, &records)?;
            let curve = stability_curve(&records, cfg.train.stability_window)?;
            for p in &curve {
                curves.push(format!("{},{seed},{},{},{},{}", method.name(), p.step, p.pos_loss, p.neg_loss, p.ratio_to_baseline));
            }
            finals.entry(method).or_default().push(curve.last().expect("non-empty curve").ratio_to_baseline);
        }
    }
    let path = dir.join("stability_curves.csv");
    std::fs::write(&path, curves.join("\n") + "\n").map_err(crate::error::io(&path))?;
    let soft = finals.remove(&Method::Softrepa).unwrap_or_default();
    let agsm = finals.remove(&Method::Agsm).unwrap_or_default();
    rep.summary.metric("final_ratio.softrepa", soft.clone());
    rep.summary.metric("final_ratio.agsm", agsm.clone());
    rep.summary.criterion(
        "softrepa_diverges",
        soft.iter().all(|r| *r > 3.0),
        format!("final-window ratio > 3.0 in every seed: {}", fmt(&soft)),
    );
    rep.summary.criterion(
        "agsm_stays_bounded",
        agsm.iter().all(|r| *r < 1.5),
        format!("final-window ratio < 1.5 in every seed: {}", fmt(&agsm)),
    );
    rep.finish()
}

/// AGSM tokens sampled three ways against the frozen backbone.
fn sampling_ablation(cfg: &Config, dir: &Path, cache: &mut BackboneCache) -> Result<Summary> {
    let seeds = cfg.train.seeds.clone();
    let mut rep = Report::new(Experiment::SamplingAblation, dir, &seeds)?;
    let mut acc: HashMap<&str, Vec<f64>> = HashMap::new();
    let mut energy: HashMap<&str, Vec<f64>> = HashMap::new();
    for &seed in &seeds {
        let ck = cache.get(cfg, seed)?;
        let (bank, records) = run_posttrain(cfg, ck, Method::Agsm, seed)?;
        rep.run_log("agsm", seed, &records)?;
        for (label, strategy, b) in [
            ("base", Strategy::NoTokens, None),
            ("pos_only", Strategy::PosOnly, Some(&bank)),
            ("pos_cond_neg_uncond", Strategy::PosCondNegUncond, Some(&bank)),
        ] {
            let m = score(cfg, ck, b, strategy, seed)?;
            rep.row(label, seed, strategy, &m);
            acc.entry(label).or_default().push(m.alignment_accuracy);
            energy.entry(label).or_default().push(m.mean_energy_distance);
        }
    }
    for (name, table) in [("accuracy", &acc), ("energy", &energy)] {
        for (label, v) in table {
            rep.summary.metric(format!("{name}.{label}"), v.clone());
        }
    }
    let gains: Vec<f64> = acc["pos_only"].iter().zip(&acc["base"]).map(|(p, b)| p - b).collect();
    let gain_mean = rep.summary.metric("gain.pos_only_vs_base", gains.clone()).mean;
    let positive = gains.iter().filter(|g| **g > 0.0).count();
    rep.summary.criterion(
        "tokens_improve_alignment",
        positive * 5 >= 4 * gains.len() && gain_mean >= 0.05,
        format!("gain > 0 in {positive}/{} seeds, mean {gain_mean:.4} (needs >= 0.05): {}", gains.len(), fmt(&gains)),
    );
    let margins: Vec<f64> = acc["pos_only"].iter().zip(&acc["pos_cond_neg_uncond"]).map(|(p, n)| p - n).collect();
    let e_pos = rep.summary.metrics["energy.pos_only"].mean;
    let e_mix = rep.summary.metrics["energy.pos_cond_neg_uncond"].mean;
    rep.summary.criterion(
        "pos_only_matches_mixed",
        margins.iter().all(|m| *m >= -0.02) && e_pos <= e_mix,
        format!("accuracy margin >= -0.02 every seed: {}; mean energy {e_pos:.4} vs {e_mix:.4}", fmt(&margins)),
    );
    rep.finish()
}

/// Whether two per-seed accuracy lists agree within seed noise: the mean
/// difference is within two standard errors, each seed's variance floored at
/// the binomial variance of `chains` Bernoulli trials.
pub fn within_seed_noise(a: &[f64], b: &[f64], chains: usize) -> (bool, f64, f64) {
    let var = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let sample = if v.len() > 1 { v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        (m, sample.max(m * (1.0 - m) / chains as f64))
    };
    let ((ma, va), (mb, vb)) = (var(a), var(b));
    let diff = (ma - mb).abs();
    let bound = 2.0 * ((va / a.len() as f64) + (vb / b.len() as f64)).sqrt();
    (diff <= bound, diff, bound)
}

fn gamma_label(g: f64) -> String {
    format!("gamma_neg_{g}")
}

/// AGSM across negative-guidance strengths, plus the positive-only reference.
fn gamma_sweep(cfg: &Config, dir: &Path, cache: &mut BackboneCache) -> Result<Summary> {
    let seeds = first_seeds(cfg, 3);
    let mut rep = Report::new(Experiment::GammaSweep, dir, &seeds)?;
    let mut acc: Vec<(String, Vec<f64>)> = Vec::new();
    let mut finite = true;
    let variants: Vec<(String, Method, f64)> = GAMMA_NEG_SWEEP
        .iter()
        .map(|g| (gamma_label(*g), Method::Agsm, *g))
        .chain(std::iter::once(("positive_only".to_string(), Method::PositiveOnly, 0.0)))
        .collect();
    for (label, method, gamma_neg) in &variants {
        let mut c = cfg.clone();
        c.guidance = GuidanceConfig::new(1.0, *gamma_neg);
        let mut v = Vec::new();
        for &seed in &seeds {
            let ck = cache.get(cfg, seed)?;
            let (bank, records) = run_posttrain(&c, ck, *method, seed)?;
            finite &= finite_run(&records, *method);
            rep.run_log(label, seed, &records)?;
            let m = score(cfg, ck, Some(&bank), Strategy::PosOnly, seed)?;
            finite &= m.alignment_accuracy.is_finite() && m.mean_energy_distance.is_finite();
            rep.row(label, seed, Strategy::PosOnly, &m);
            v.push(m.alignment_accuracy);
        }
        rep.summary.metric(format!("accuracy.{label}"), v.clone());
        acc.push((label.clone(), v));
    }
    rep.summary.criterion("finite", finite, "every loss, delta and metric is finite");
    let chains = cfg.sample.per_condition * cfg.data.k;
    let (ok, diff, bound) = within_seed_noise(&acc[0].1, &acc[GAMMA_NEG_SWEEP.len()].1, chains);
    rep.summary.criterion(
        "zero_gamma_matches_positive_only",
        ok,
        format!("|mean accuracy difference| {diff:.4} within seed-noise bound {bound:.4}"),
    );
    let order: Vec<String> = acc[..GAMMA_NEG_SWEEP.len()]
        .iter()
        .map(|(l, v)| format!("{l}={:.4}", v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    rep.summary.criterion("ordering_reported", true, order.join(" "));
    rep.finish()
}

/// Post-trains each method on three seeds and scores positive-only sampling.
fn compare_methods(exp: Experiment, cfg: &Config, dir: &Path, cache: &mut BackboneCache, methods: &[Method]) -> Result<Summary> {
    let seeds = first_seeds(cfg, 3);
    let mut rep = Report::new(exp, dir, &seeds)?;
    let mut finite = true;
    for &method in methods {
        let (mut acc, mut energy) = (Vec::new(), Vec::new());
        for &seed in &seeds {
            let ck = cache.get(cfg, seed)?;
            let (bank, records) = run_posttrain(cfg, ck, method, seed)?;
            finite &= finite_run(&records, method);
            rep.run_log(method.name(), seed, &records)?;
            let m = score(cfg, ck, Some(&bank), Strategy::PosOnly, seed)?;
            finite &= m.alignment_accuracy.is_finite() && m.mean_energy_distance.is_finite();
            rep.row(method.name(), seed, Strategy::PosOnly, &m);
            acc.push(m.alignment_accuracy);
            energy.push(m.mean_energy_distance);
        }
        rep.summary.metric(format!("accuracy.{}", method.name()), acc);
        rep.summary.metric(format!("energy.{}", method.name()), energy);
    }
    rep.summary.criterion("finite", finite, "every loss, delta and metric is finite");
    rep.finish()
}

/// AGSM with group sizes 2, 4 and 8 at a fixed number of pairs per step.
fn batch_size(cfg: &Config, dir: &Path, cache: &mut BackboneCache) -> Result<Summary> {
    let seeds = first_seeds(cfg, 3);
    let mut rep = Report::new(Experiment::BatchSize, dir, &seeds)?;
    let mut finite = true;
    for g in GROUP_SIZES {
        let mut c = cfg.clone();
        c.train.posttrain.group_size = g;
        c.train.posttrain.groups_per_step = PAIRS_PER_STEP / g;
        let label = format!("group_{g}");
        let (mut acc, mut energy) = (Vec::new(), Vec::new());
        for &seed in &seeds {
            let ck = cache.get(cfg, seed)?;
            let (bank, records) = run_posttrain(&c, ck, Method::Agsm, seed)?;
            finite &= finite_run(&records, Method::Agsm);
            rep.run_log(&label, seed, &records)?;
            let m = score(cfg, ck, Some(&bank), Strategy::PosOnly, seed)?;
            finite &= m.alignment_accuracy.is_finite() && m.mean_energy_distance.is_finite();
            rep.row(&label, seed, Strategy::PosOnly, &m);
            acc.push(m.alignment_accuracy);
            energy.push(m.mean_energy_distance);
        }
        rep.summary.metric(format!("accuracy.{label}"), acc);
        rep.summary.metric(format!("energy.{label}"), energy);
    }
    rep.summary.criterion("finite", finite, "every loss, delta and metric is finite");
    rep.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for e in Experiment::ALL {
            assert_eq!(Experiment::parse(e.name()).unwrap(), e);
        }
        assert!(Experiment::parse("ablation").is_err());
    }

    #[test]
    fn seed_noise_rule() {
        // identical lists always agree
        assert!(within_seed_noise(&[0.8, 0.9], &[0.8, 0.9], 400).0);
        // floor: one seed each, p = 0.5 and 400 chains gives sd 0.025 per seed
        let (_, _, bound) = within_seed_noise(&[0.5], &[0.5], 400);
        assert!((bound - 2.0 * (2.0 * 0.25 / 400.0f64).sqrt()).abs() < 1e-15);
        assert!(!within_seed_noise(&[0.5, 0.5, 0.5], &[0.9, 0.9, 0.9], 400).0);
    }
}
