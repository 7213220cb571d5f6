//! Declarative run description, read from and written to TOML.
//!
//! Every field has a default, so a config file only needs the fields it
//! changes plus `config_version`. Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::datasets::DatasetId;
use crate::error::{config_err, Error, Result};
use crate::losses::LossWeights;
use crate::networks::{ArchConfig, StackSplit};

pub const CONFIG_VERSION: u32 = 1;
/// Environment variable naming the dataset root.
pub const DATA_ROOT_ENV: &str = "CGRS_DATA_ROOT";

pub const FASHION_TOTAL_STEPS: u64 = 100_000;
pub const DEFAULT_TOTAL_STEPS: u64 = 50_000;

/// A `source:target` pair of dataset ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Scenario {
    pub source: DatasetId,
    pub target: DatasetId,
}

impl Scenario {
    pub fn new(source: DatasetId, target: DatasetId) -> Self {
        Scenario { source, target }
    }

    pub fn is_fashion(&self) -> bool {
        self.source.is_fashion() || self.target.is_fashion()
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.source, self.target)
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("scenario {s:?} is not of the form source:target")))?;
        Ok(Scenario::new(a.parse()?, b.parse()?))
    }
}

impl TryFrom<String> for Scenario {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Scenario> for String {
    fn from(s: Scenario) -> String {
        s.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub config_version: u32,
    pub scenario: Scenario,
    pub split: StackSplit,
    pub weights: LossWeights,
    pub batch_size: usize,
    /// Rounds of the three phases; `None` picks the scenario default.
    pub total_steps: Option<u64>,
    pub lr0: f64,
    pub decay: f64,
    pub decay_every: u64,
    pub seed: u64,
    pub content_constancy: bool,
    /// Labeled target samples per class routed to the classifier (0 = unsupervised).
    pub semi_supervised_target_count: usize,
    /// Pre-activation noise on the low stack of grafted decoders.
    pub graft_noise: bool,
    pub graft_noise_sigma: f64,
    pub adam: AdamConfig,
    pub arch: ArchConfig,
    pub precision: Precision,
    /// Dataset root; the `CGRS_DATA_ROOT` variable overrides the default.
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    /// Optional mask for the content loss: whitespace-separated 0/1 values, one
    /// per pixel (784) or per element (2352).
    pub mask_path: Option<PathBuf>,
    /// Use only the first n training samples of each domain.
    pub train_limit: Option<usize>,
    /// Use only the first n target test samples.
    pub test_limit: Option<usize>,
    pub eval_batch_size: usize,
    pub log_every: u64,
    /// Periodic checkpoints (0 = only the final one).
    pub checkpoint_every: u64,
    /// Hash parameter groups around each phase and fail if a frozen one changed.
    pub verify_update_sets: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            config_version: CONFIG_VERSION,
            scenario: Scenario::new(DatasetId::Mnist, DatasetId::Usps),
            split: StackSplit::default(),
            weights: LossWeights::default(),
            batch_size: 64,
            total_steps: None,
            lr0: 0.0002,
            decay: 0.95,
            decay_every: 20_000,
            seed: 0,
            content_constancy: true,
            semi_supervised_target_count: 0,
            graft_noise: false,
            graft_noise_sigma: 0.01,
            adam: AdamConfig::default(),
            arch: ArchConfig::reference(),
            precision: Precision::F32,
            data_root: default_data_root(),
            out_dir: PathBuf::from("runs/default"),
            mask_path: None,
            train_limit: None,
            test_limit: None,
            eval_batch_size: 256,
            log_every: 100,
            checkpoint_every: 5_000,
            verify_update_sets: false,
        }
    }
}

fn default_data_root() -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

impl ExperimentConfig {
    pub fn for_scenario(scenario: Scenario) -> Self {
        ExperimentConfig {
            scenario,
            ..Default::default()
        }
    }

    /// Configured step count, or 100k for Fashion scenarios and 50k otherwise.
    pub fn total_steps(&self) -> u64 {
        self.total_steps.unwrap_or(if self.scenario.is_fashion() {
            FASHION_TOTAL_STEPS
        } else {
            DEFAULT_TOTAL_STEPS
        })
    }

    pub fn dtype(&self) -> DType {
        self.precision.dtype()
    }

    /// Standard deviation of the graft noise actually applied.
    pub fn effective_graft_sigma(&self) -> f64 {
        if self.graft_noise {
            self.graft_noise_sigma
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return Err(Error::UnsupportedVersion {
                what: "config".into(),
                found: self.config_version,
                supported: CONFIG_VERSION,
            });
        }
        if self.batch_size == 0 {
            return config_err("batch_size must be positive");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return config_err(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return config_err(format!("decay must be in (0, 1], got {}", self.decay));
        }
        if self.decay_every == 0 {
            return config_err("decay_every must be positive");
        }
        if !(self.graft_noise_sigma >= 0.0 && self.graft_noise_sigma.is_finite()) {
            return config_err("graft_noise_sigma must be nonnegative");
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return config_err(format!("invalid Adam settings {a:?}"));
        }
        if self.eval_batch_size == 0 {
            return config_err("eval_batch_size must be positive");
        }
        if matches!(self.train_limit, Some(0)) || matches!(self.test_limit, Some(0)) {
            return config_err("train_limit and test_limit must be positive when set");
        }
        self.weights.validate()?;
        self.arch.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// Fields that fix parameter shapes and the meaning of a trained model.
    pub fn compatibility_errors(&self, other: &ExperimentConfig) -> Vec<String> {
        let mut out = Vec::new();
        if self.arch != other.arch {
            out.push(format!("arch: {:?} vs {:?}", self.arch, other.arch));
        }
        if self.split != other.split {
            out.push(format!(
                "split (n_high, n_low): {} = ({}, {}) vs {} = ({}, {})",
                self.split,
                self.split.n_high(),
                self.split.n_low(),
                other.split,
                other.split.n_high(),
                other.split.n_low()
            ));
        }
        if self.scenario != other.scenario {
            out.push(format!("scenario: {} vs {}", self.scenario, other.scenario));
        }
        out
    }
}
