//! `slfr` command-line entry point.

mod commands;
mod config;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::SweepParam;

/// Exit code for configuration and input errors.
pub const EXIT_USAGE: u8 = 2;
/// Exit code for numerical aborts (non-finite losses, divergence).
pub const EXIT_NUMERICAL: u8 = 3;

/// A configuration or input problem reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "slfr", version, about = "Confounder-aware matrix factorization pipelines")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed (overrides SLFR_SEED and the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load, binarize and split raw interactions.
    Prepare(PrepareArgs),
    /// Train the user- and/or item-side VAE and extract confounder representations.
    Pretrain(PretrainArgs),
    /// Train the matrix-factorization model (gamma = 0 is plain MF).
    Train(TrainArgs),
    /// Evaluate a trained model.
    Eval(EvalArgs),
    /// Train and evaluate over a grid of gamma or alpha values.
    Sweep(SweepArgs),
    /// Generate a synthetic world and run the feedback-loop simulation.
    Simulate(SimulateArgs),
    /// Collect evaluation reports under a directory into one table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct PrepareArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
    /// Binarization rule: rating_ge_4, watch_ratio_ge_2 or passthrough.
    #[arg(long)]
    rule: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Side {
    User,
    Item,
    Both,
}

#[derive(Debug, Args)]
struct VaeFlags {
    #[arg(long)]
    alpha: Option<f64>,
    /// Latent dimension (must equal the MF dimension used later).
    #[arg(long)]
    dz: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long = "vae-epochs")]
    vae_epochs: Option<usize>,
    #[arg(long = "vae-lr")]
    vae_lr: Option<f64>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[arg(long)]
    split: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    side: Side,
    #[command(flatten)]
    vae: VaeFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainFlags {
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long = "neg-ratio")]
    neg_ratio: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// product or sum.
    #[arg(long)]
    composition: Option<String>,
    /// Popularity exponent for the IPS baseline.
    #[arg(long = "ips-eta")]
    ips_eta: Option<f64>,
    /// Regularize whole embedding tables instead of the batch rows.
    #[arg(long = "full-l2")]
    full_l2: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    split: PathBuf,
    /// Confounder representations from `pretrain` (needed when gamma > 0).
    #[arg(long)]
    reps: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// Comma-separated cutoffs, e.g. 10,20,30.
    #[arg(long, alias = "Ks")]
    ks: Option<String>,
    /// heldout, valid, or a user,item CSV of external labels.
    #[arg(long)]
    labels: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    split: PathBuf,
    #[arg(long, value_enum)]
    param: Option<SweepParam>,
    /// Comma-separated grid values.
    #[arg(long)]
    grid: Option<String>,
    /// Precomputed representations for a gamma sweep; pretrained otherwise.
    #[arg(long)]
    reps: Option<PathBuf>,
    #[arg(long, alias = "Ks")]
    ks: Option<String>,
    #[arg(long)]
    labels: Option<String>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    vae: VaeFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long = "conf-strength")]
    conf_strength: Option<f64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    runs: PathBuf,
    /// Where to write the tables; defaults to the runs directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<slfr::Error>() {
            return if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_USAGE };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_USAGE;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
