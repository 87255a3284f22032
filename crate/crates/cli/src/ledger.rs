//! Machine-readable record of an experiment: configuration, per-run
//! outcomes and per-image predictions.

use std::path::{Path, PathBuf};

use hysteg::{HybridRecord, HybridReport, Threshold};
use serde::{Deserialize, Serialize};

use crate::metrics::ImageMetrics;
use crate::{CliError, ExperimentConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub split_seed: u64,
    pub train_seed: u64,
    pub epochs: usize,
    pub final_loss: f64,
    pub final_train_error: f64,
    /// Snapshot vote error on this run's test images.
    pub cnn_test_error: f64,
    pub srm_test_error: f64,
    pub n_test_images: usize,
    pub checkpoint: PathBuf,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub pair_id: String,
    pub label: u8,
    pub metrics: ImageMetrics,
    /// Runs whose test set held this image.
    pub membership: Vec<usize>,
    /// Per-run answers, aligned with `membership`.
    pub cnn_votes: Vec<u8>,
    pub srm_votes: Vec<u8>,
    pub cnn_pred: u8,
    pub srm_pred: u8,
    /// Used to estimate the threshold rather than to evaluate it.
    pub calibration: bool,
}

impl PredictionRecord {
    pub const CSV_HEADER: &'static str =
        "image_id,pair_id,label,rho_bar,n_tests,cnn_votes,srm_votes,cnn_pred,srm_pred,calibration";

    pub fn csv_row(&self, metric: hysteg::MetricKind) -> String {
        let votes = |v: &[u8]| {
            self.membership
                .iter()
                .zip(v)
                .map(|(r, a)| format!("{r}:{a}"))
                .collect::<Vec<_>>()
                .join(";")
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.image_id,
            self.pair_id,
            self.label,
            self.metrics.get(metric).map_or_else(|| "all-wet".to_string(), |v| v.to_string()),
            self.membership.len(),
            votes(&self.cnn_votes),
            votes(&self.srm_votes),
            self.cnn_pred,
            self.srm_pred,
            u8::from(self.calibration),
        )
    }

    pub fn hybrid_record(&self, metric: hysteg::MetricKind) -> Option<HybridRecord> {
        Some(HybridRecord {
            image_id: self.image_id.clone(),
            rho_bar: self.metrics.get(metric)?,
            cnn_pred: self.cnn_pred,
            srm_pred: self.srm_pred,
            label: self.label,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub context: String,
    pub runs: Vec<RunRecord>,
    pub predictions: Vec<PredictionRecord>,
    /// Pairs that no run tested.
    pub never_tested: Vec<String>,
    /// How a +-1 change at the pixel range edges was handled.
    pub saturation: String,
    pub threshold: Threshold,
    pub hybrid: HybridReport,
}

pub const SATURATION_RULE: &str = "+1 at 255 becomes -1, -1 at 0 becomes +1";

impl RunLedger {
    /// Records the hybrid is evaluated on.
    pub fn evaluation_records(&self) -> Vec<HybridRecord> {
        self.predictions
            .iter()
            .filter(|p| self.config.optimistic_threshold || !p.calibration)
            .filter_map(|p| p.hybrid_record(self.config.metric))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let json = serde_json::to_string_pretty(self).expect("serializable");
        crate::write_file(path, json)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}
