//! `dtrec` — dataset generation, training, evaluation, ablation sweeps and
//! analysis for the reasoning recommender, driven by archived run configs.
//!
//! Every command writes into a fresh run directory (an existing non-empty
//! target gets a `-2`, `-3`, … suffix rather than being overwritten) and
//! leaves three artifacts behind: `resolved_config` (every effective setting,
//! defaults included), `metrics.json`, and `log`. Exit codes: 0 success,
//! 1 runtime failure, 2 usage or config error.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or config: wrong flags, unknown/ill-typed keys,
    /// missing input files. Exit code 2.
    Usage(String),
    /// The run itself failed after inputs checked out. Exit code 1.
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "dtrec",
    version,
    about = "Reasoning-enhanced sequential recommender: data, training, evaluation, ablations",
    after_help = "Set DTREC_THREADS to cap internal parallelism. Configs are TOML with one \
                  section per module; `--set section.key=value` overrides file values."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic taxonomy dataset (interactions + label sidecars).
    GenData {
        /// TOML config; `[data]` section plus top-level `seed`.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset/run directory.
        #[arg(long)]
        out: PathBuf,
        /// Override one config key, e.g. `--set data.pi=0.4`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Shorthand for `--set seed=N`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one variant on a dataset; writes checkpoint, history and test metrics.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (with interactions.tsv) or a TSV file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a saved checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train variants × seeds and consolidate ranking quality and reasoning
    /// cost into one CSV.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Per-length-group reasoning depth and state trajectories for a checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn main() {
    dtrec_core::init_threads();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenData { config, out, set, seed } => {
            commands::gen_data(config.as_deref(), &out, &set, seed)
        }
        Cmd::Train { config, data, out, set, seed } => {
            commands::train(config.as_deref(), &data, &out, &set, seed)
        }
        Cmd::Eval { checkpoint, data, out, config, set } => {
            commands::eval(&checkpoint, &data, &out, config.as_deref(), &set)
        }
        Cmd::Ablate { config, data, out, set } => {
            commands::ablate(config.as_deref(), &data, &out, &set)
        }
        Cmd::Analyze { checkpoint, data, out, config, set } => {
            commands::analyze(&checkpoint, &data, &out, config.as_deref(), &set)
        }
    };
    if let Err(e) = result {
        eprintln!("error: {}", e.message());
        std::process::exit(e.code());
    }
}
