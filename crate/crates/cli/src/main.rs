//! `mgrank`: corpus generation, training, reward computation, evaluation,
//! response parsing, and the variance and cross-domain experiments.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mgrank_core::Error as CoreError;

/// Bad flags or configuration; exits with code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Parser, Debug)]
#[command(name = "mgrank", version, about = "Multi-granularity ranking rewards and GRPO on a tabular score policy")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default)]
pub struct Common {
    /// JSON object of dotted config keys, e.g. {"grpo.beta": 0.04}.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key (repeatable): --set grpo.beta=0.1
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file (directory for `train`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for reward and gradient evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic multi-domain corpus as JSONL.
    Gen(GenArgs),
    /// Train the tabular policy on a dataset.
    Train(TrainArgs),
    /// Compute rewards and advantages for externally sampled responses.
    Reward(RewardArgs),
    /// SRCC/PLCC of predictions or a checkpoint against a dataset.
    Eval(EvalArgs),
    /// Parse structured responses into scores, or print the prompt.
    Parse(ParseArgs),
    /// Variance of the composite reward versus the overall-only reward.
    Prop1(Prop1Args),
    /// Single-domain versus joint training across domains.
    Xdomain(XdomainArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub domains: Option<usize>,
    /// Standard deviation of the overall-quality noise.
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Dataset file (JSONL, or CSV by extension).
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated attribute names; defaults to the four standard ones.
    #[arg(long, value_delimiter = ',')]
    pub attributes: Vec<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Total number of steps (including those of a resumed checkpoint).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub log_every: Option<usize>,
    /// Adaptive dimension weights: `off` (fixed uniform) or `on`.
    #[arg(long)]
    pub learn_weights: Option<String>,
    /// Ground-truth comparison mode: `hard` or `soft`.
    #[arg(long)]
    pub gt_mode: Option<String>,
    /// Continue from a checkpoint; its configuration is used.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RewardArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Samples JSONL: {"image_id", "samples": [{"overall", "attrs": {..}}, ..]}.
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long)]
    pub gt_mode: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Predictions JSONL: {"image_id", "overall", "attrs": {..}}.
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    pub predictions: Option<PathBuf>,
    /// Use the mean scores of a trained policy as predictions.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ParseArgs {
    /// A response text file, or JSONL of {"id", "text"} objects.
    #[arg(long, required_unless_present = "prompt")]
    pub input: Option<PathBuf>,
    /// Print the assessment prompt instead of parsing.
    #[arg(long)]
    pub prompt: bool,
    #[arg(long, value_delimiter = ',')]
    pub attributes: Vec<String>,
}

#[derive(Args, Debug)]
pub struct Prop1Args {
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub attributes: Option<usize>,
    /// Variance of each dimension's reward noise.
    #[arg(long)]
    pub noise_var: Option<f64>,
}

#[derive(Args, Debug)]
pub struct XdomainArgs {
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub domains: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub gt_mode: Option<String>,
}

/// 1 for I/O, 2 for usage or configuration, 3 for data and domain errors.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Io { .. } => 1,
                CoreError::Config(_) | CoreError::InvalidSpec(_) | CoreError::EmptyAttributeList => 2,
                _ => 3,
            };
        }
        if cause.is::<std::io::Error>() {
            return 1;
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
