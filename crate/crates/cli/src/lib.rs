//! The `idc` command line: dataset preparation, training, evaluation, the
//! validation experiment, the review service and single-image prediction.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config, or input files.
    #[error("{0}")]
    Input(String),
    /// Artifacts that do not belong together, or are corrupt.
    #[error("{0}")]
    State(String),
    #[error("{0}")]
    Training(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::State(_) => 3,
            CliError::Training(_) => 4,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "idc", version, about = "IDC patch classifier with human-in-the-loop retraining")]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding `seed` in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Artifact directory, overriding `data_dir` in the config.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan, balance, augment and split the dataset into a manifest.
    Prepare,
    /// Train on the manifest and write the best checkpoint and history CSV.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score a checkpoint on the manifest's test split.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Run the four-group misclassification retraining experiment.
    Experiment {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Start the review service.
    Serve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        port: Option<u16>,
    },
    /// Predict one image and print the result as JSON.
    Predict {
        image: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write a synthetic dataset (patch directory or feature CSV).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        /// Class overlap of the generated tissue patches; 0 is separable.
        #[arg(long, default_value_t = 0.0, conflicts_with = "look_alike")]
        overlap: f32,
        /// Fraction of patches that mimic the other class except for nucleus size.
        #[arg(long)]
        look_alike: Option<f32>,
        /// Write feature vectors of this dimension to `out` as CSV instead of patches.
        #[arg(long)]
        features: Option<usize>,
    },
}

/// Resolves the effective config: file, then flag overrides.
pub fn effective_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.data_dir {
        cfg.data_dir = d.clone();
    }
    Ok(cfg)
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = effective_config(&cli).and_then(|cfg| commands::dispatch(&cli.command, &cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
