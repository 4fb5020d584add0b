//! Experiment configuration file (TOML).
//!
//! ```toml
//! [data]
//! manifest = "data/manifest.toml"   # relative to this file
//!
//! [tokenizer]
//! lowercase = true                  # vocab size and max_len come from [encoder]
//!
//! [encoder]
//! layers = 2
//! hidden = 32
//! heads = 2
//! vocab = 2000
//! max_len = 32
//! intermediate = 64
//!
//! [head]
//! kind = "cnn"
//!
//! [training]
//! epochs = 3
//!
//! [experiment]
//! strategy = "bald"
//! freeze = 0
//! seeds = [1, 2, 3]
//!
//! [pretrain]                        # optional masked-token warm-up
//! steps = 200
//!
//! [sweep]                           # optional: run every strategy x freeze arm
//! strategies = ["bald", "random"]
//! freezes = [0, 3, -3]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::{AcquisitionConfig, Strategy};
use crate::data::TokenizerConfig;
use crate::model::{EncoderConfig, FreezeSpec, HeadConfig, PretrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub manifest: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSection {
    #[serde(default = "yes")]
    pub lowercase: bool,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        TokenizerSection { lowercase: true }
    }
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_encoder_lr")]
    pub encoder_lr: f64,
    #[serde(default = "d_head_lr")]
    pub head_lr: f64,
    /// Carry weights from the previous round instead of restarting from the
    /// run's base state.
    #[serde(default)]
    pub warm_start: bool,
}

fn d_epochs() -> usize {
    3
}
fn d_batch() -> usize {
    8
}
fn d_encoder_lr() -> f64 {
    1e-4
}
fn d_head_lr() -> f64 {
    1e-3
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: d_epochs(),
            batch_size: d_batch(),
            encoder_lr: d_encoder_lr(),
            head_lr: d_head_lr(),
            warm_start: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSourceKind {
    Oracle,
    Human,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "d_initial")]
    pub initial_size: usize,
    #[serde(default = "d_q")]
    pub q: usize,
    #[serde(default = "d_rounds")]
    pub rounds: usize,
    /// Stochastic passes per element for BALD.
    #[serde(default = "d_samples")]
    pub samples: usize,
    #[serde(default = "d_strategy")]
    pub strategy: Strategy,
    #[serde(default)]
    pub freeze: FreezeSpec,
    #[serde(default = "d_runs")]
    pub num_runs: usize,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "d_pool_cap")]
    pub pool_cap: usize,
    /// Use only the first `pool_size` training records (`S_x`); the pool is
    /// this prefix minus the initial subset.
    #[serde(default)]
    pub pool_size: Option<usize>,
    #[serde(default = "d_source")]
    pub label_source: LabelSourceKind,
    /// Human mode: seconds to wait for a batch before pausing.
    #[serde(default = "d_timeout")]
    pub label_timeout_secs: u64,
    /// Write the pre/post-training snapshots of every round under `snapshots/`.
    #[serde(default)]
    pub save_snapshots: bool,
}

fn d_initial() -> usize {
    10
}
fn d_q() -> usize {
    100
}
fn d_rounds() -> usize {
    9
}
fn d_samples() -> usize {
    50
}
fn d_strategy() -> Strategy {
    Strategy::Bald
}
fn d_runs() -> usize {
    3
}
fn d_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}
fn d_pool_cap() -> usize {
    19_990
}
fn d_source() -> LabelSourceKind {
    LabelSourceKind::Oracle
}
fn d_timeout() -> u64 {
    3600
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            initial_size: d_initial(),
            q: d_q(),
            rounds: d_rounds(),
            samples: d_samples(),
            strategy: d_strategy(),
            freeze: FreezeSpec(0),
            num_runs: d_runs(),
            seeds: d_seeds(),
            pool_cap: d_pool_cap(),
            pool_size: None,
            label_source: d_source(),
            label_timeout_secs: d_timeout(),
            save_snapshots: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.initial_size == 0 {
            return bad("initial_size must be at least 1".into());
        }
        if self.seeds.len() != self.num_runs {
            return bad(format!(
                "{} seeds for num_runs = {}",
                self.seeds.len(),
                self.num_runs
            ));
        }
        if self.num_runs == 0 {
            return bad("num_runs must be at least 1".into());
        }
        self.acquisition(self.strategy)
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn acquisition(&self, strategy: Strategy) -> AcquisitionConfig {
        match strategy {
            Strategy::Bald => AcquisitionConfig::bald(self.samples, self.q, self.pool_cap),
            Strategy::Random => AcquisitionConfig::random(self.q, self.pool_cap),
        }
    }
}

/// Optional grid of arms run under identical seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub strategies: Vec<Strategy>,
    #[serde(default)]
    pub freezes: Vec<FreezeSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    #[serde(default)]
    pub tokenizer: TokenizerSection,
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

impl RunConfig {
    /// Reads and validates a config; a relative manifest path is resolved
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            ConfigError::Parse { msg, .. } => ConfigError::Parse {
                path: path.to_path_buf(),
                msg,
            },
            other => other,
        })?;
        if cfg.data.manifest.is_relative() {
            cfg.data.manifest = path
                .parent()
                .unwrap_or(Path::new("."))
                .join(&cfg.data.manifest);
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<string>"),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.encoder
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.head
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.experiment.validate()?;
        for arm in self.arms() {
            self.experiment
                .acquisition(arm.0)
                .validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            arm.1
                .frozen_range(self.encoder.layers)
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if self.training.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn tokenizer(&self) -> TokenizerConfig {
        TokenizerConfig {
            vocab_size: self.encoder.vocab,
            max_len: self.encoder.max_len,
            lowercase: self.tokenizer.lowercase,
        }
    }

    /// `(strategy, freeze)` combinations to run, in sweep order.
    pub fn arms(&self) -> Vec<(Strategy, FreezeSpec)> {
        let (strategies, freezes) = match &self.sweep {
            Some(s) => (
                if s.strategies.is_empty() {
                    vec![self.experiment.strategy]
                } else {
                    s.strategies.clone()
                },
                if s.freezes.is_empty() {
                    vec![self.experiment.freeze]
                } else {
                    s.freezes.clone()
                },
            ),
            None => (vec![self.experiment.strategy], vec![self.experiment.freeze]),
        };
        let mut arms = Vec::new();
        for f in &freezes {
            for s in &strategies {
                arms.push((*s, *f));
            }
        }
        arms
    }
}
