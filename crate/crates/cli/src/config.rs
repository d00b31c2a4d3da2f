//! The JSON run configuration. Every section rejects unknown keys.

use std::path::Path;

use agsm_core::agsm::{GuidanceConfig, Method, PosttrainConfig};
use agsm_core::baselines::SoftrepaConfig;
use agsm_core::data::MixtureSpec;
use agsm_core::denoiser::{DenoiserConfig, PretrainConfig};
use agsm_core::flow::FlowConfig;
use agsm_core::optim::CosineRestarts;
use agsm_core::sampling::Strategy;
use agsm_core::schedule::NoiseSchedule;
use serde::{Deserialize, Serialize};

use crate::error::{io, CliError, Result};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub tokens: TokenSection,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub sample: SampleSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection { timesteps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleSection {
    pub fn build(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Diffusion,
    Flow,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Diffusion => "diffusion",
            ModelKind::Flow => "flow",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "diffusion" => Ok(ModelKind::Diffusion),
            "flow" => Ok(ModelKind::Flow),
            other => Err(CliError::UnknownName { kind: "model", name: other.into(), expected: "diffusion, flow".into() }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub network: DenoiserConfig,
    pub flow: FlowConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: ModelKind::Diffusion,
            network: DenoiserConfig { token_dim: 128, ..DenoiserConfig::default() },
            flow: FlowConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenSection {
    /// Tokens per polarity.
    pub count: usize,
    pub init_std: f64,
    pub ema_decay: f64,
}

impl Default for TokenSection {
    fn default() -> Self {
        TokenSection { count: 4, init_std: 0.02, ema_decay: 0.999 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Ring modes.
    pub k: usize,
    pub dim: usize,
    pub radius: f64,
    pub mode_std: f64,
    /// Pairs in the backbone's pretraining corpus.
    pub train_size: usize,
    /// Fraction of pretraining labels moved to the neighbouring mode.
    pub label_noise: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { k: 8, dim: 2, radius: 4.0, mode_std: 0.3, train_size: 20000, label_noise: 0.4 }
    }
}

impl DataSection {
    pub fn spec(&self) -> Result<MixtureSpec> {
        Ok(MixtureSpec::ring(self.k, self.dim, self.radius, self.mode_std)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosttrainSection {
    pub method: Method,
    pub steps: usize,
    pub lr: CosineRestarts,
    pub weight_decay: f64,
    pub group_size: usize,
    pub groups_per_step: usize,
}

impl Default for PosttrainSection {
    fn default() -> Self {
        let d = PosttrainConfig::default();
        PosttrainSection {
            method: d.method,
            steps: d.steps,
            lr: CosineRestarts { base_lr: 3e-3, ..d.lr },
            weight_decay: d.weight_decay,
            group_size: d.group_size,
            groups_per_step: d.groups_per_step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub seed: u64,
    /// Seeds of multi-seed experiments.
    pub seeds: Vec<u64>,
    /// Frozen backbone checkpoint for post-training; pretrained in-process when absent.
    #[serde(default)]
    pub backbone: Option<String>,
    pub pretrain: PretrainConfig,
    pub posttrain: PosttrainSection,
    pub softrepa: SoftrepaConfig,
    /// Window of the stability curve, in steps.
    pub stability_window: usize,
    /// Validation period in steps; 0 disables validation during post-training.
    pub val_every: usize,
    /// Validation chains per condition.
    pub val_per_condition: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            backbone: None,
            pretrain: PretrainConfig::default(),
            posttrain: PosttrainSection::default(),
            softrepa: SoftrepaConfig::default(),
            stability_window: 100,
            val_every: 0,
            val_per_condition: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    /// Chains per condition in evaluation runs.
    pub per_condition: usize,
    pub scale: f64,
    pub strategy: StrategyName,
    /// Euler steps of the flow sampler.
    pub flow_steps: usize,
    /// Reference draws per condition for energy distance.
    pub reference: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection { per_condition: 50, scale: 3.0, strategy: StrategyName::PosOnly, flow_steps: 100, reference: 200 }
    }
}

/// Serializable mirror of [`Strategy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyName {
    PosOnly,
    PosCondNegUncond,
    NoTokens,
}

impl From<StrategyName> for Strategy {
    fn from(s: StrategyName) -> Self {
        match s {
            StrategyName::PosOnly => Strategy::PosOnly,
            StrategyName::PosCondNegUncond => Strategy::PosCondNegUncond,
            StrategyName::NoTokens => Strategy::NoTokens,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io(path))?;
        let cfg: Config = serde_json::from_str(&text).map_err(|source| CliError::Json { path: path.into(), source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.data.spec()?;
        self.guidance.validate()?;
        self.softrepa().validate()?;
        if self.model.kind == ModelKind::Flow {
            self.model.flow.validate()?;
        }
        let net = &self.model.network;
        if net.data_dim != self.data.dim || net.num_conditions != self.data.k {
            return Err(CliError::Config(format!(
                "network expects {}-d data with {} conditions but the data section has {} and {}",
                net.data_dim, net.num_conditions, self.data.dim, self.data.k
            )));
        }
        if !(0.0..=1.0).contains(&self.data.label_noise) {
            return Err(CliError::Config(format!("label_noise {} outside [0, 1]", self.data.label_noise)));
        }
        if self.tokens.count == 0 {
            return Err(CliError::Config("tokens.count must be positive".into()));
        }
        if self.train.seeds.is_empty() {
            return Err(CliError::Config("train.seeds is empty".into()));
        }
        if self.sample.per_condition == 0 || self.sample.reference == 0 || self.sample.flow_steps == 0 {
            return Err(CliError::Config("sample sizes and flow_steps must be positive".into()));
        }
        Ok(())
    }

    fn softrepa(&self) -> SoftrepaConfig {
        self.train.softrepa
    }

    /// The core post-training configuration for `method`.
    pub fn posttrain(&self, method: Method) -> PosttrainConfig {
        let p = &self.train.posttrain;
        PosttrainConfig {
            method,
            steps: p.steps,
            lr: p.lr,
            weight_decay: p.weight_decay,
            group_size: p.group_size,
            groups_per_step: p.groups_per_step,
            guidance: self.guidance,
            softrepa: self.train.softrepa,
        }
    }
}
