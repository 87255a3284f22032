use std::path::{Path, PathBuf};

use hysteg::cnn::{CnnConfig, Profile, TrainSpec, VoteRule};
use hysteg::ensemble::FeatureConfig;
use hysteg::{Algorithm, MetricKind};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

fn default_bins() -> usize {
    25
}
fn default_learners() -> usize {
    hysteg::ensemble::DEFAULT_LEARNERS
}
fn default_ring() -> usize {
    hysteg::cnn::train::DEFAULT_RING_CAPACITY
}
fn default_lr() -> f64 {
    0.001
}
fn default_batch() -> usize {
    64
}
fn default_metric() -> MetricKind {
    MetricKind::RhoBarU
}
fn default_calibration_seed() -> u64 {
    17
}
fn default_sigma() -> f64 {
    hysteg::costs::DEFAULT_SIGMA
}
fn default_hill_cutoff() -> f64 {
    hysteg::costs::DEFAULT_HILL_CUTOFF
}

/// Everything that determines an experiment's results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus_root: PathBuf,
    /// Stegos used for training.
    pub algorithm: Algorithm,
    /// Stegos used for testing; differs from `algorithm` in blind mode.
    #[serde(default)]
    pub test_algorithm: Option<Algorithm>,
    pub payload: f64,
    /// Run `i` splits with `split_seed + i`.
    pub split_seed: u64,
    /// Seed the corpus stegos were embedded with (recorded for provenance).
    pub embed_seed: u64,
    /// One CNN/EC pair per seed.
    pub train_seeds: Vec<u64>,
    pub profile: Profile,
    #[serde(default = "default_metric")]
    pub metric: MetricKind,
    #[serde(default = "default_bins")]
    pub n_bins: usize,
    /// Stabilizing constant of the UNIWARD cost.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// HILL costs above this are left out of the mean.
    #[serde(default = "default_hill_cutoff")]
    pub hill_cutoff: f64,
    /// Training pairs per run.
    pub n_train: usize,
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_ring")]
    pub ring_capacity: usize,
    #[serde(default)]
    pub vote_rule: VoteRule,
    #[serde(default = "default_learners")]
    pub n_learners: usize,
    #[serde(default)]
    pub d_sub: Option<usize>,
    #[serde(default)]
    pub features: FeatureConfig,
    /// Estimate the threshold on the same images it is evaluated on.
    #[serde(default)]
    pub optimistic_threshold: bool,
    #[serde(default = "default_calibration_seed")]
    pub calibration_seed: u64,
    /// Not part of the hash.
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Desk defaults: 64x64 covers, 200 training pairs, 50 epochs, 3 runs.
    pub fn desk(corpus_root: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            corpus_root: corpus_root.into(),
            algorithm: Algorithm::SUniward,
            test_algorithm: None,
            payload: 0.4,
            split_seed: 1,
            embed_seed: 7,
            train_seeds: vec![101, 102, 103],
            profile: Profile::Desk,
            metric: MetricKind::RhoBarU,
            n_bins: 25,
            sigma: default_sigma(),
            hill_cutoff: default_hill_cutoff(),
            n_train: 200,
            epochs: 50,
            learning_rate: 0.001,
            batch_size: 64,
            ring_capacity: default_ring(),
            vote_rule: VoteRule::Discrete,
            n_learners: default_learners(),
            d_sub: None,
            features: FeatureConfig::default(),
            optimistic_threshold: false,
            calibration_seed: default_calibration_seed(),
            output_dir: output_dir.into(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("serializable")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        if self.train_seeds.is_empty() {
            return bad("train_seeds must list at least one seed");
        }
        if !(0.0..=3f64.log2()).contains(&self.payload) {
            return bad("payload must lie in [0, log2 3]");
        }
        if !(self.sigma > 0.0) || !(self.hill_cutoff > 0.0) {
            return bad("sigma and hill_cutoff must be positive");
        }
        if self.n_bins < 2 {
            return bad("n_bins must be at least 2");
        }
        if self.n_train == 0 || self.epochs == 0 {
            return bad("n_train and epochs must be positive");
        }
        if self.n_learners % 2 == 0 {
            return bad("n_learners must be odd");
        }
        self.train_spec(0).validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.features.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn test_algorithm(&self) -> Algorithm {
        self.test_algorithm.unwrap_or(self.algorithm)
    }

    pub fn is_blind(&self) -> bool {
        self.test_algorithm() != self.algorithm
    }

    pub fn cnn_config(&self) -> CnnConfig {
        CnnConfig::for_profile(self.profile)
    }

    pub fn train_spec(&self, seed: u64) -> TrainSpec {
        TrainSpec {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: 0.9,
            weight_decay: 0.0,
            max_epochs: self.epochs,
            seed,
            ring_capacity: self.ring_capacity,
        }
    }

    /// Hex sha256 of the result-relevant fields.
    pub fn hash(&self) -> String {
        let mut copy = self.clone();
        copy.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&copy).expect("serializable");
        hex::encode(Sha256::digest(json))
    }

    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }

    /// Row label used in hybrid tables.
    pub fn context(&self) -> String {
        if self.is_blind() {
            format!("blind {}->{} {}", self.algorithm.cli_name(), self.test_algorithm().cli_name(), self.payload)
        } else {
            format!("{} {}", self.algorithm.cli_name(), self.payload)
        }
    }
}
