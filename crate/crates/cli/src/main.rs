//! `snare`: dataset generation, training, evaluation, comparison and rollouts.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Environment variable holding the worker-thread count.
pub const THREADS_ENV: &str = "SNARE_THREADS";

#[derive(Parser, Debug)]
#[command(name = "snare", version, about = "Constrained neural surrogates with Levenberg-Marquardt repair")]
struct Cli {
    /// Print a machine-readable JSON summary on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Optional TOML file; flags given on the command line take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a problem family and instances, and attach oracle solutions.
    Generate(GenerateArgs),
    /// Train one model per seed on a dataset, or a control policy on a scenario.
    Train(TrainArgs),
    /// Evaluate checkpoints on the test split.
    Eval(EvalArgs),
    /// Roll out a controller in a scenario and write trajectory CSVs.
    Rollout(RolloutArgs),
    /// Train and evaluate every method on one dataset.
    Compare(CompareArgs),
}

#[derive(Args, Debug, Default)]
pub struct GenerateArgs {
    /// ncp or qcqp.
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub neq: Option<usize>,
    #[arg(long)]
    pub nineq: Option<usize>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Skip the oracle solves.
    #[arg(long)]
    pub no_oracle: bool,
    /// Dataset JSON to write.
    #[arg(long)]
    pub out: PathBuf,
}

/// Training knobs shared by `train` and `compare`.
#[derive(Args, Debug, Default, Clone)]
pub struct TrainFlags {
    /// Number of seeds; seeds run from `--seed` upward.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// First seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Relaxation horizon T_d.
    #[arg(long)]
    pub decay: Option<usize>,
    /// Repair tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    /// LM weight λ.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Hidden widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    #[arg(long, conflicts_with = "scenario")]
    pub dataset: Option<PathBuf>,
    /// Train a control policy for this scenario instead of a dataset model.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// snare, soft, soft-epochs-then-hard or penalty-grad.
    #[arg(long)]
    pub mode: Option<String>,
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Default)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Checkpoint files written by `train`, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub checkpoints: Vec<PathBuf>,
    /// Override the inference method stored in the checkpoint.
    #[arg(long)]
    pub method: Option<String>,
    /// Repair tolerances, comma separated; one report row per tol and seed.
    #[arg(long, value_delimiter = ',')]
    pub tol_sweep: Option<Vec<f64>>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Split to evaluate: train, valid or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Report CSV to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Default)]
pub struct RolloutArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// Policy checkpoint from `train --scenario`; the nominal controller otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Integration steps; the scenario's value by default.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Number of sampled safe initial states.
    #[arg(long)]
    pub starts: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Apply no repair: the raw (nominal or trained) control is used.
    #[arg(long)]
    pub no_repair: bool,
    /// Output directory for trajectory CSVs.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Default)]
pub struct CompareArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Epochs without the hard layer for soft-epochs-then-hard.
    #[arg(long)]
    pub soft_epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

fn init_threads() -> Result<(), commands::CliError> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| commands::CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        if n == 0 {
            return Err(commands::CliError::Usage(format!("{THREADS_ENV} must be at least 1")));
        }
        // a second call in the same process is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = || -> Result<serde_json::Value, commands::CliError> {
        init_threads()?;
        let file = config::FileConfig::load(cli.config.as_deref())?;
        match &cli.command {
            Command::Generate(a) => commands::generate(a, &file),
            Command::Train(a) => commands::train(a, &file),
            Command::Eval(a) => commands::eval(a, &file),
            Command::Rollout(a) => commands::rollout(a, &file),
            Command::Compare(a) => commands::compare(a, &file),
        }
    };
    match run() {
        Ok(summary) => {
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            } else if let Some(msg) = summary.get("message").and_then(|m| m.as_str()) {
                println!("{msg}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
