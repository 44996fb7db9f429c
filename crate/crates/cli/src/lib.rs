//! Batch pipeline: dataset generation, training, prediction, evaluation and baselines.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::Config;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<mssde_core::Error> for CliError {
    fn from(e: mssde_core::Error) -> Self {
        use mssde_core::Error as E;
        match e {
            E::Data(d) => d.into(),
            E::Checkpoint(_) => CliError::Data(e.to_string()),
            E::Invalid(m) => CliError::Usage(m),
            E::NonFinite(_) | E::Compute(_) => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<mssde_core::datagen::DataError> for CliError {
    fn from(e: mssde_core::datagen::DataError) -> Self {
        use mssde_core::datagen::DataError as D;
        match e {
            D::NonFinite { .. } => CliError::Numerical(e.to_string()),
            D::Invalid(m) => CliError::Usage(m),
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mssde", version, about = "Multiscale latent SDE surrogates for PDE trajectories")]
pub struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "MSSDE_THREADS")]
    pub threads: Option<usize>,
    /// Output directory; relative paths in the config resolve against it.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Integrate a PDE preset and write a noisy dataset.
    Generate,
    /// Hierarchical training over n_eta = 0..=n_eta; writes checkpoints and a log.
    Train,
    /// Predictive moments, errors and spectra on a dataset split.
    Predict,
    /// Errors of the predictive mean on a dataset split.
    Evaluate,
    /// Coarse DNS, DMD and POD-SINDy at matched latent dimension.
    Baseline,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Train => "train",
            Command::Predict => "predict",
            Command::Evaluate => "evaluate",
            Command::Baseline => "baseline",
        }
    }
}

/// Resolves the configuration from file, `--set` and `--seed`.
pub fn resolve_config(cli: &Cli) -> Result<Config, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            Config::parse(&text)?
        }
        None => Config::defaults(),
    };
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        // A pool may already exist when run is called twice in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = resolve_config(cli)?;
    std::fs::create_dir_all(&cli.out).map_err(|e| CliError::Data(format!("{}: {e}", cli.out.display())))?;
    commands::dispatch(cli.command, &cfg, &cli.out)
}
