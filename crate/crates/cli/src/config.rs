use std::path::{Path, PathBuf};

use hlnode_core::systems::{InitialConditions, System, SystemSpec};
use hlnode_core::training::{Regime, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable overriding the config seed.
pub const SEED_ENV: &str = "HLNODE_SEED";

/// Everything a command needs, read from one JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; datasets use it directly, models add the replica index.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Generate data inline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    /// Load data from a dataset CSV written by `generate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Right-hand side `f1 ; f2` replacing the built-in system.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalConfig>,
    #[serde(default = "one")]
    pub replicas: usize,
    /// Index of this run within a population.
    #[serde(default)]
    pub replica: usize,
}

fn one() -> usize {
    1
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output: None,
            data: None,
            dataset: None,
            ode: None,
            train: None,
            eval: None,
            replicas: 1,
            replica: 0,
        }
    }
}

/// Dataset generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Omitted when `ode` supplies the dynamics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<System>,
    pub initial: InitialConditions,
    #[serde(default = "unit")]
    pub window: f64,
    pub n_traj: usize,
    pub n_t: usize,
    #[serde(default = "five")]
    pub noise_pct: f64,
    #[serde(default)]
    pub supply_velocity: bool,
}

fn unit() -> f64 {
    1.0
}

fn five() -> f64 {
    5.0
}

impl DataConfig {
    /// The system spec; a free particle stands in when an expression
    /// supplies the dynamics.
    pub fn spec(&self) -> SystemSpec {
        SystemSpec {
            system: self.system.clone().unwrap_or(System::Oscillator {
                omega: [0.0; 2],
                gamma: [0.0; 2],
            }),
            initial: self.initial.clone(),
            window: self.window,
        }
    }
}

/// Population evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub regularized: Vec<PathBuf>,
    #[serde(default)]
    pub baseline: Vec<PathBuf>,
    #[serde(default = "hundred")]
    pub test_trajectories: usize,
}

fn hundred() -> usize {
    100
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            regularized: Vec::new(),
            baseline: Vec::new(),
            test_trajectories: 100,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `HLNODE_SEED`, then an explicit seed flag.
    pub fn apply_seed(&mut self, flag: Option<u64>) -> Result<(), CliError> {
        if let Ok(text) = std::env::var(SEED_ENV) {
            self.seed = text
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}={text:?} is not an unsigned integer")))?;
        }
        if let Some(s) = flag {
            self.seed = s;
        }
        Ok(())
    }

    pub fn output_dir(&self) -> Result<&Path, CliError> {
        self.output
            .as_deref()
            .ok_or_else(|| CliError::Config("no output directory (set `output` or pass --output)".into()))
    }

    pub fn train_config(&self) -> Result<&TrainConfig, CliError> {
        self.train
            .as_ref()
            .ok_or_else(|| CliError::Config("missing `train` section".into()))
    }

    /// Checks the sections a command needs before any compute starts.
    pub fn validate_for_training(&self) -> Result<(), CliError> {
        self.output_dir()?;
        let train = self.train_config()?;
        train.validate()?;
        if self.replicas == 0 {
            return Err(CliError::Config("replicas must be at least 1".into()));
        }
        match (&self.data, &self.dataset) {
            (Some(_), Some(_)) => return Err(CliError::Config("give either `data` or `dataset`, not both".into())),
            (None, None) => return Err(CliError::Config("missing `data` or `dataset`".into())),
            (Some(d), None) => self.validate_data(d)?,
            (None, Some(_)) => {
                if self.ode.is_some() {
                    return Err(CliError::Config("`ode` needs inline `data` to generate from".into()));
                }
            }
        }
        if self.ode.is_some() && train.regime != Regime::MetricOnly {
            return Err(CliError::Config("`ode` is only supported with regime metric_only".into()));
        }
        Ok(())
    }

    pub fn validate_data(&self, d: &DataConfig) -> Result<(), CliError> {
        match (&d.system, &self.ode) {
            (Some(_), Some(_)) => Err(CliError::Config("give either `data.system` or `ode`, not both".into())),
            (None, None) => Err(CliError::Config("missing `data.system` (or `ode`)".into())),
            (Some(_), None) => Ok(d.spec().validate()?),
            (None, Some(_)) => Ok(()),
        }
    }
}
