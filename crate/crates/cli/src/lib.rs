//! Command-line driver: dataset generation, training, evaluation and
//! probing of user-supplied ODEs.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use hlnode_core::training::Regime;
use thiserror::Error;

pub use commands::{cmd_eval, cmd_generate, cmd_probe, cmd_train, load_run, LoadedRun, TrainOutcome};
pub use config::{DataConfig, EvalConfig, RunConfig, SEED_ENV};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] hlnode_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 0 ok, 1 configuration or I/O problem, 2 numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "hlnode", version, about = "Helmholtz metrics and Lagrangian neural ODEs")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed and HLNODE_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a dataset CSV and JSON sidecar.
    Generate,
    /// Train one model or a population of replicas.
    Train {
        /// Right-hand side such as "x1^2 + x2^2 ; 0" (metric_only only).
        #[arg(long)]
        ode: Option<String>,
        #[arg(long, value_parser = parse_regime)]
        regime: Option<Regime>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        replicas: Option<usize>,
        /// Worker threads for replicas.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Compare populations of trained runs on held-out trajectories.
    Eval {
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Parse an ODE and fit a Helmholtz metric to it.
    Probe {
        #[arg(long)]
        ode: String,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown regime `{s}` (metric_only, lnode_regularized, lnode_baseline)"))
}

/// Loads the config, applies overrides and runs the command.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_seed(cli.seed)?;
    if let Some(out) = cli.output {
        cfg.output = Some(out);
    }
    match cli.command {
        Command::Generate => cmd_generate(&cfg).map(|_| ()),
        Command::Train {
            ode,
            regime,
            epochs,
            replicas,
            jobs,
        } => {
            if ode.is_some() {
                cfg.ode = ode;
            }
            if let Some(r) = replicas {
                cfg.replicas = r;
            }
            if regime.is_some() || epochs.is_some() {
                let t = cfg.train.get_or_insert_with(Default::default);
                if let Some(r) = regime {
                    t.regime = r;
                }
                if let Some(e) = epochs {
                    t.epochs = e;
                }
            }
            cmd_train(&cfg, jobs).map(|_| ())
        }
        Command::Eval { jobs } => cmd_eval(&cfg, jobs).map(|_| ()),
        Command::Probe { ode, epochs } => {
            cfg.ode = Some(ode);
            if let Some(e) = epochs {
                cfg.train.get_or_insert_with(commands::probe_train_config).epochs = e;
            }
            cmd_probe(&cfg).map(|_| ())
        }
    }
}
