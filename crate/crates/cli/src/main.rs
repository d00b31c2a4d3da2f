use std::path::PathBuf;
use std::process::ExitCode;

use agsm_cli::commands::{cmd_eval, cmd_posttrain, cmd_pretrain, cmd_sample, SampleArgs};
use agsm_cli::config::ModelKind;
use agsm_cli::experiments::cmd_experiment;
use agsm_cli::Result;
use agsm_core::agsm::Method;
use agsm_core::sampling::Strategy;
use clap::{Parser, Subcommand};

/// Soft-token alignment post-training for diffusion and flow models on
/// synthetic mixtures.
#[derive(Parser)]
#[command(name = "agsm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a conditional backbone and save its checkpoint.
    Pretrain {
        /// JSON configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Post-train soft tokens against a frozen backbone.
    Posttrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// agsm, bt, positive-only, shared-token or softrepa.
        #[arg(long, default_value = "agsm")]
        method: String,
        /// diffusion or flow.
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw samples from a checkpoint into a CSV file.
    Sample {
        checkpoint: PathBuf,
        /// Condition to sample; every condition when omitted.
        #[arg(long)]
        condition: Option<usize>,
        /// Chains per sampled condition.
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 3.0)]
        scale: f64,
        /// pos-only, pos-cond-neg-uncond or no-tokens.
        #[arg(long, default_value = "pos-only")]
        strategy: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Euler steps for flow checkpoints.
        #[arg(long, default_value_t = 100)]
        flow_steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a samples CSV and write a metrics JSON file.
    Eval {
        samples: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a multi-seed experiment and write its report directory.
    Experiment {
        /// stability, gamma-sweep, bt-vs-pl, sampling-ablation, training-strategy or batch-size.
        name: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn model(name: Option<String>) -> Result<Option<ModelKind>> {
    name.map(|m| ModelKind::parse(&m)).transpose()
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Pretrain { config, model: m, seed, out } => {
            let path = cmd_pretrain(config.as_deref(), model(m)?, seed, out)?;
            println!("{}", path.display());
        }
        Command::Posttrain { config, method, model: m, seed, out } => {
            let method = Method::parse(&method)?;
            let o = cmd_posttrain(config.as_deref(), method, model(m)?, seed, out)?;
            println!("{}\n{}", o.checkpoint.display(), o.run_csv.display());
        }
        Command::Sample { checkpoint, condition, n, scale, strategy, seed, flow_steps, out } => {
            let args = SampleArgs { condition, n, scale, strategy: Strategy::parse(&strategy)?, seed, flow_steps };
            println!("{}", cmd_sample(&checkpoint, &args, out)?.display());
        }
        Command::Eval { samples, config, out } => {
            let (m, path) = cmd_eval(&samples, config.as_deref(), out)?;
            println!("alignment_accuracy {:.4} mean_energy_distance {:.4}", m.alignment_accuracy, m.mean_energy_distance);
            println!("{}", path.display());
        }
        Command::Experiment { name, config, out } => {
            let (summary, dir) = cmd_experiment(&name, config.as_deref(), out)?;
            for c in &summary.criteria {
                println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            println!("{}", dir.display());
            return Ok(summary.pass);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
