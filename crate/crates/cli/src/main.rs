//! `vfusion`: prepare data, train, evaluate and compare experiments.
//!
//! Exit codes: 0 success, 1 training failure, 2 configuration error, 3 data
//! error, 4 usage error.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod cache;
mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use vfusion_core::Error;

use crate::config::ExperimentConfig;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Usage(String),
    Failed(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Usage(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Failed(m) => write!(f, "{m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) | Error::Parameter(_) | Error::Graph(_) | Error::Layout(_) => CliError::Config(msg),
            Error::Ingestion { .. }
            | Error::Consistency(_)
            | Error::Format(_)
            | Error::Data(_)
            | Error::Shape(_)
            | Error::Io(_)
            | Error::Json(_) => CliError::Data(msg),
            Error::NonFinite(_) | Error::Internal(_) => CliError::Failed(msg),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "vfusion", version, about = "Multi-sensor contrastive training experiments")]
struct Cli {
    /// Log level filter (overridden by RUST_LOG).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Window, split and cache the dataset of a config.
    Prepare {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one run per seed; finished seeds are skipped.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Train only this seed instead of the configured ones.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate trained runs on the test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated nodes; defaults to the inference set.
        #[arg(long, value_delimiter = ',')]
        nodes: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge the metrics of several experiment directories into one table.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(config: &Path, out: Option<PathBuf>) -> Result<(ExperimentConfig, String), CliError> {
    let (mut cfg, text) = ExperimentConfig::load(config)?;
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    Ok((cfg, text))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Prepare { config, out } => commands::prepare(&load(&config, out)?.0),
        Command::Train { config, seed, out } => {
            let (cfg, text) = load(&config, out)?;
            commands::train_runs(&cfg, &text, seed)
        }
        Command::Eval { config, seed, nodes, out } => commands::eval(&load(&config, out)?.0, seed, &nodes),
        Command::Report { dirs, out } => commands::report(&dirs, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 4 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(&cli.log));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
