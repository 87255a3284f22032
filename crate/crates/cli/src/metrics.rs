use hysteg::costs::{cost_hill, cost_mipod, cost_uniward, default_cutoff, mean_cost, shannon_entropy};
use hysteg::{Algorithm, Error, GrayImage, MetricKind};
use serde::{Deserialize, Serialize};

/// Entropy and the three mean costs of one image. A mean over an all-wet
/// map is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub entropy: f64,
    pub rho_bar_u: Option<f64>,
    pub rho_bar_h: Option<f64>,
    pub rho_bar_m: Option<f64>,
}

fn mean_or_wet(result: hysteg::Result<hysteg::MetricValue>) -> hysteg::Result<Option<f64>> {
    match result {
        Ok(v) => Ok(Some(v.value)),
        Err(Error::AllEntriesExcluded) => Ok(None),
        Err(e) => Err(e),
    }
}

impl ImageMetrics {
    /// MiPOD costs are taken at the configured payload.
    pub fn compute(image: &GrayImage, cfg: &crate::ExperimentConfig) -> hysteg::Result<Self> {
        Self::with(image, cfg.payload, cfg.sigma, cfg.hill_cutoff)
    }

    pub fn with(image: &GrayImage, payload: f64, sigma: f64, hill_cutoff: f64) -> hysteg::Result<Self> {
        let u = cost_uniward(image, sigma)?;
        let h = cost_hill(image)?;
        let m = cost_mipod(image, payload)?;
        Ok(Self {
            entropy: shannon_entropy(image).value,
            rho_bar_u: mean_or_wet(mean_cost(&u, default_cutoff(Algorithm::SUniward)))?,
            rho_bar_h: mean_or_wet(mean_cost(&h, hill_cutoff))?,
            rho_bar_m: mean_or_wet(mean_cost(&m, default_cutoff(Algorithm::MiPod)))?,
        })
    }

    pub fn get(&self, kind: MetricKind) -> Option<f64> {
        match kind {
            MetricKind::Entropy => Some(self.entropy),
            MetricKind::RhoBarU => self.rho_bar_u,
            MetricKind::RhoBarH => self.rho_bar_h,
            MetricKind::RhoBarM => self.rho_bar_m,
        }
    }

    pub const CSV_HEADER: &'static str = "rho_bar_U,rho_bar_H,rho_bar_M,entropy";

    pub fn csv_fields(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "all-wet".to_string(), |v| format!("{v:.6}"));
        format!("{},{},{},{:.6}", f(self.rho_bar_u), f(self.rho_bar_h), f(self.rho_bar_m), self.entropy)
    }
}
