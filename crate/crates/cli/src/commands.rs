//! The `pretrain`, `posttrain`, `sample` and `eval` commands and the
//! building blocks the experiments share with them.

use std::path::{Path, PathBuf};

use agsm_core::agsm::{posttrain, Backbone, Method, RunRecord};
use agsm_core::data::{sample_pairs, shift_labels, MixtureSpec};
use agsm_core::denoiser::{pretrain_backbone, Objective, SoftTokenBank};
use agsm_core::eval::{alignment_accuracy, per_condition_energy};
use agsm_core::rng::{keyed, substream, Stream};
use agsm_core::sampling::{ddpm_sample_conds, flow_sample_conds, Strategy};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{Config, ModelKind};
use crate::error::{io, CliError, Result};
use crate::logs::{read_samples_csv, write_json, write_run_csv, write_samples_csv};

/// Environment variable that relocates every default output path.
pub const OUTPUT_ROOT_VAR: &str = "AGSM_OUTPUT_ROOT";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io(dir))
}

pub fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

/// Pretrains a backbone on the (possibly label-shifted) ring corpus of `seed`.
pub fn pretrain(cfg: &Config, kind: ModelKind, seed: u64) -> Result<Checkpoint> {
    let spec = cfg.data.spec()?;
    let sched = cfg.schedule.build()?;
    let mut rng = substream(seed, Stream::Data);
    let mut data = sample_pairs(&spec, cfg.data.train_size, &mut rng);
    shift_labels(&mut data, cfg.data.label_noise, spec.num_conditions(), &mut rng)?;
    let objective = match kind {
        ModelKind::Diffusion => Objective::Noise(&sched),
        ModelKind::Flow => Objective::Velocity,
    };
    let (params, _) = pretrain_backbone(&data, objective, cfg.model.network, &cfg.train.pretrain, seed)?;
    Ok(Checkpoint { kind, schedule: cfg.schedule, flow: cfg.model.flow, params, bank: None })
}

/// The configured backbone checkpoint, or a fresh pretraining run.
pub fn backbone(cfg: &Config, kind: ModelKind, seed: u64) -> Result<Checkpoint> {
    match &cfg.train.backbone {
        Some(path) => {
            let ck = Checkpoint::load(Path::new(path))?;
            if ck.kind != kind {
                return Err(CliError::Config(format!("{path} holds a {} backbone, not {}", ck.kind.name(), kind.name())));
            }
            if ck.params.config != cfg.model.network {
                return Err(CliError::Config(format!("{path} does not match model.network")));
            }
            Ok(Checkpoint { bank: None, ..ck })
        }
        None => pretrain(cfg, kind, seed),
    }
}

pub fn init_bank(cfg: &Config, seed: u64) -> Result<SoftTokenBank> {
    let t = &cfg.tokens;
    Ok(SoftTokenBank::init(t.count, cfg.model.network.token_dim, t.init_std, t.ema_decay, &mut keyed(seed, Stream::Init, 1))?)
}

/// Draws one chain per entry of `conds` from the checkpoint's model.
#[allow(clippy::too_many_arguments)]
pub fn sample_chains(
    ck: &Checkpoint,
    bank: Option<&SoftTokenBank>,
    conds: &[usize],
    scale: f64,
    strategy: Strategy,
    flow_steps: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    Ok(match ck.kind {
        ModelKind::Diffusion => {
            let sched = ck.schedule.build()?;
            ddpm_sample_conds(&ck.params, bank, &sched, conds, scale, strategy, seed)?
        }
        ModelKind::Flow => flow_sample_conds(&ck.params, bank, conds, flow_steps, scale, strategy, seed)?,
    })
}

/// `per_condition` chains of every condition, in condition order.
pub fn balanced_conditions(spec: &MixtureSpec, per_condition: usize) -> Vec<usize> {
    (0..spec.num_conditions()).flat_map(|k| std::iter::repeat_n(k, per_condition)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub samples: usize,
    pub alignment_accuracy: f64,
    /// Per condition; `null` where no sample carries that condition.
    pub energy_distance: Vec<Option<f64>>,
    /// Mean over conditions that have samples.
    pub mean_energy_distance: f64,
}

pub fn evaluate(samples: &[(Vec<f64>, usize)], spec: &MixtureSpec, reference: usize, seed: u64) -> Result<Metrics> {
    let acc = alignment_accuracy(samples, spec)?;
    let energy = per_condition_energy(samples, spec, reference, &mut substream(seed, Stream::Eval))?;
    let present: Vec<f64> = energy.iter().flatten().copied().collect();
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok(Metrics { samples: samples.len(), alignment_accuracy: acc, energy_distance: energy, mean_energy_distance: mean })
}

/// Post-trains a fresh bank for `method` on `ck`, validating every
/// `val_every` steps when that is non-zero.
pub fn run_posttrain(cfg: &Config, ck: &Checkpoint, method: Method, seed: u64) -> Result<(SoftTokenBank, Vec<RunRecord>)> {
    let spec = cfg.data.spec()?;
    let sched = ck.schedule.build()?;
    let backbone = match ck.kind {
        ModelKind::Diffusion => Backbone::Diffusion(&sched),
        ModelKind::Flow => Backbone::Flow(&ck.flow),
    };
    let pcfg = cfg.posttrain(method);
    let every = cfg.train.val_every;
    let val_conds = balanced_conditions(&spec, cfg.train.val_per_condition.max(1));
    let mut failure = None;
    let mut validate = |step: usize, bank: &SoftTokenBank| -> Option<f64> {
        if every == 0 || !(step + 1).is_multiple_of(every) || failure.is_some() {
            return None;
        }
        let s = &cfg.sample;
        match sample_chains(ck, Some(bank), &val_conds, s.scale, s.strategy.into(), s.flow_steps, seed) {
            Ok(xs) => {
                let pairs: Vec<_> = xs.into_iter().zip(val_conds.iter().copied()).collect();
                alignment_accuracy(&pairs, &spec).ok()
            }
            Err(e) => {
                failure = Some(e);
                None
            }
        }
    };
    let out = posttrain(&ck.params, init_bank(cfg, seed)?, backbone, &spec, &pcfg, seed, &mut validate)?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(out)
}

fn frozen(ck: &Checkpoint) -> u64 {
    ck.params.fingerprint()
}

pub fn cmd_pretrain(config: Option<&Path>, kind: Option<ModelKind>, seed: Option<u64>, out: Option<PathBuf>) -> Result<PathBuf> {
    let cfg = load_config(config)?;
    let kind = kind.unwrap_or(cfg.model.kind);
    let seed = seed.unwrap_or(cfg.train.seed);
    let ck = pretrain(&cfg, kind, seed)?;
    let path = out.unwrap_or_else(|| output_root().join(format!("pretrain-{}-seed{seed}", kind.name())).join("backbone.ckpt"));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    ck.save(&path)?;
    Ok(path)
}

/// Paths written by [`cmd_posttrain`].
#[derive(Debug, Clone)]
pub struct PosttrainOutputs {
    pub checkpoint: PathBuf,
    pub run_csv: PathBuf,
}

pub fn cmd_posttrain(
    config: Option<&Path>,
    method: Method,
    kind: Option<ModelKind>,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
) -> Result<PosttrainOutputs> {
    let cfg = load_config(config)?;
    let kind = kind.unwrap_or(cfg.model.kind);
    let seed = seed.unwrap_or(cfg.train.seed);
    let ck = backbone(&cfg, kind, seed)?;
    let print = frozen(&ck);
    let (bank, records) = run_posttrain(&cfg, &ck, method, seed)?;
    debug_assert_eq!(print, frozen(&ck));
    let dir = out_dir.unwrap_or_else(|| output_root().join(format!("posttrain-{}-{}-seed{seed}", method.name(), kind.name())));
    ensure_dir(&dir)?;
    let outputs = PosttrainOutputs { checkpoint: dir.join("tokens.ckpt"), run_csv: dir.join("run.csv") };
    Checkpoint { bank: Some(bank), ..ck }.save(&outputs.checkpoint)?;
    write_run_csv(&outputs.run_csv, &records)?;
    std::fs::write(dir.join("config.json"), cfg.to_json() + "\n").map_err(io(dir.join("config.json")))?;
    Ok(outputs)
}

#[derive(Debug, Clone)]
pub struct SampleArgs {
    /// `None` samples every condition.
    pub condition: Option<usize>,
    pub n: usize,
    pub scale: f64,
    pub strategy: Strategy,
    pub seed: u64,
    pub flow_steps: usize,
}

pub fn cmd_sample(checkpoint: &Path, args: &SampleArgs, out: Option<PathBuf>) -> Result<PathBuf> {
    let ck = Checkpoint::load(checkpoint)?;
    let k = ck.params.config.num_conditions;
    let conds: Vec<usize> = match args.condition {
        Some(c) if c >= k => return Err(agsm_core::Error::UnknownCondition { id: c, known: k }.into()),
        Some(c) => vec![c; args.n],
        None => (0..k).flat_map(|c| std::iter::repeat_n(c, args.n)).collect(),
    };
    if args.strategy != Strategy::NoTokens && ck.bank.is_none() {
        return Err(CliError::Config(format!(
            "strategy {} needs soft tokens but {} has none",
            args.strategy.name(),
            checkpoint.display()
        )));
    }
    let xs = sample_chains(&ck, ck.bank.as_ref(), &conds, args.scale, args.strategy, args.flow_steps, args.seed)?;
    let samples: Vec<_> = xs.into_iter().zip(conds).collect();
    let path = out.unwrap_or_else(|| {
        let cond = args.condition.map(|c| format!("c{c}")).unwrap_or_else(|| "all".into());
        output_root().join("samples").join(format!("{}-{cond}-seed{}.csv", args.strategy.name(), args.seed))
    });
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_samples_csv(&path, &samples)?;
    Ok(path)
}

pub fn cmd_eval(samples_csv: &Path, config: Option<&Path>, out: Option<PathBuf>) -> Result<(Metrics, PathBuf)> {
    let cfg = load_config(config)?;
    let samples = read_samples_csv(samples_csv)?;
    let m = evaluate(&samples, &cfg.data.spec()?, cfg.sample.reference, cfg.train.seed)?;
    let path = out.unwrap_or_else(|| samples_csv.with_extension("metrics.json"));
    write_json(&path, &m)?;
    Ok((m, path))
}
