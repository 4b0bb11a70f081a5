//! `cpgm`: train, evaluate, sweep, export and gradient-check open-set models
//! from a JSON run config.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{CmdResult, EvalSet};

#[derive(Parser)]
#[command(name = "cpgm", version, about = "Open-set recognition with conditional generative models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run seed; overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoint.bin and loss.csv.
    Train(Common),
    /// Fit the detector and score a checkpoint; writes metrics.json and confusion.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to <out>/checkpoint.bin.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        on: EvalSet,
    },
    /// Train and score every configured mode over the openness sweep; writes sweep.csv.
    Sweep(Common),
    /// Write per-sample latent codes and reconstruction errors to embeddings.csv.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        on: EvalSet,
    },
    /// Finite-difference check of the configured model's objectives.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Samples in the checked batch.
        #[arg(long, default_value_t = 8)]
        batch: usize,
    },
}

/// `CPGM_THREADS` caps worker threads; defaults to the available cores.
fn threads() -> CmdResult<usize> {
    match std::env::var("CPGM_THREADS") {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(commands::config_failure(format!("CPGM_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn run(cli: Cli) -> CmdResult<bool> {
    let load = |c: &Common| commands::load_config(&c.config, c.seed, c.out.clone());
    match cli.command {
        Command::Train(c) => commands::train(&load(&c)?).map(|_| true),
        Command::Eval { common, checkpoint, on } => commands::eval(&load(&common)?, checkpoint.as_deref(), on).map(|_| true),
        Command::Sweep(c) => {
            let config = load(&c)?;
            commands::sweep(&config, threads()?).map(|_| true)
        }
        Command::ExportEmbeddings { common, checkpoint, on } => {
            commands::export_embeddings(&load(&common)?, checkpoint.as_deref(), on).map(|_| true)
        }
        Command::Gradcheck { common, batch } => commands::gradcheck(&load(&common)?, batch),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
