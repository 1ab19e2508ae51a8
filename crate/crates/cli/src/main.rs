//! `tubestream` command-line runner.
//!
//! Every run is fully determined by one TOML config file plus command-line
//! overrides. Exit status is 0 on success, 2 for configuration problems and
//! 3 for failures while running.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "tubestream", version, about = "Streaming spatio-temporal grounding on synthetic videos")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run seed (overrides `seed` in the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lr=0.002`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset file and its manifest.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Number of episodes (default: train.episodes or eval.episodes).
        #[arg(long)]
        count: Option<usize>,
        /// Generate the held-out evaluation split instead of the training split.
        #[arg(long)]
        eval_split: bool,
    },
    /// Train a model; writes a checkpoint and a CSV loss log into `--out`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset file (default: paths.dataset, else generated from the seed).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Optimiser steps (overrides train.steps).
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; prints a table and writes the JSON report to `--out`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset file (default: the generated evaluation split).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Score the ground truth against itself instead of a model.
        #[arg(long)]
        oracle: bool,
    },
    /// Stream one episode through a checkpoint and write its tube as JSON lines.
    Ground {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Episode index within the dataset.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Only stream the first N frames.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train and compare model variants; writes tables and JSON into `--out`.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variants (overrides ablate.variants).
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        /// Comma-separated seeds (overrides ablate.seeds; `--seed` runs one seed).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Skip the N_s sweep.
        #[arg(long)]
        no_sweep: bool,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Run(#[from] tubestream::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(tubestream::Error::Config(_) | tubestream::Error::UnknownStrategy { .. }) => 2,
            _ => 3,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TUBESTREAM_LOG", "info"))
        .format_timestamp(None)
        .init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
