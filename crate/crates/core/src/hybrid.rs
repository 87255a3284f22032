//! Error-versus-cost curves for the two detectors, their crossing point,
//! and per-image routing between them.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::costs::{Algorithm, Binning, MetricKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinCurve {
    pub binning: Binning,
    pub centers: Vec<f64>,
    /// `None` for empty bins.
    pub mean_error: Vec<Option<f64>>,
    pub std: Vec<Option<f64>>,
    pub count: Vec<usize>,
}

impl BinCurve {
    /// Hex sha256 over the curve's JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("serializable")))
    }

    pub fn nonempty(&self) -> usize {
        self.count.iter().filter(|&&c| c > 0).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_center,mean_error,std,count\n");
        for i in 0..self.centers.len() {
            let f = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.6}"));
            out.push_str(&format!(
                "{:.6},{},{},{}\n",
                self.centers[i],
                f(self.mean_error[i]),
                f(self.std[i]),
                self.count[i]
            ));
        }
        out
    }
}

/// Per-image record for curve building. `error` is the misclassification
/// rate of the image, 0 or 1 for a single evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub image_id: String,
    pub rho_bar: f64,
    pub error: f64,
}

/// Bins the records and reports per-bin mean and population standard
/// deviation of the error.
pub fn error_curve(records: &[ErrorRecord], binning: Binning) -> Result<BinCurve> {
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = binning.n_bins;
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); n];
    for r in records {
        members[binning.bin_of(r.rho_bar)].push(r.error);
    }
    let mut mean_error = Vec::with_capacity(n);
    let mut std = Vec::with_capacity(n);
    for m in &members {
        if m.is_empty() {
            mean_error.push(None);
            std.push(None);
            continue;
        }
        let k = m.len() as f64;
        let mean = m.iter().sum::<f64>() / k;
        let var = m.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / k;
        mean_error.push(Some(mean));
        std.push(Some(var.sqrt()));
    }
    Ok(BinCurve {
        binning,
        centers: binning.centers(),
        mean_error,
        std,
        count: members.iter().map(Vec::len).collect(),
    })
}

/// Spans the empirical `[min, max]` of the records with `n_bins` bins.
pub fn empirical_binning(records: &[ErrorRecord], n_bins: usize) -> Result<Binning> {
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    let lo = records.iter().map(|r| r.rho_bar).fold(f64::INFINITY, f64::min);
    let hi = records.iter().map(|r| r.rho_bar).fold(f64::NEG_INFINITY, f64::max);
    Binning::new(lo, hi, n_bins)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum RhoCap {
    Value(f64),
    /// The CNN is never worse.
    AlwaysCnn,
    /// SRM+EC is never worse.
    AlwaysSrm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrossingRule {
    /// Largest crossing where the CNN takes over as cost grows.
    SrmToCnn,
    /// No such crossing existed; the largest opposite crossing was used.
    CnnToSrm,
    NoCrossing,
    /// Set by hand rather than estimated.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub algorithm: Option<Algorithm>,
    pub payload: Option<f64>,
    pub metric: MetricKind,
    pub cnn_curve: Option<String>,
    pub srm_curve: Option<String>,
    pub rule: CrossingRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub rho_cap: RhoCap,
    pub provenance: Provenance,
}

impl Threshold {
    pub fn fixed(value: f64, algorithm: Option<Algorithm>, payload: Option<f64>) -> Self {
        Self {
            rho_cap: RhoCap::Value(value),
            provenance: Provenance {
                algorithm,
                payload,
                metric: MetricKind::RhoBarU,
                cnn_curve: None,
                srm_curve: None,
                rule: CrossingRule::Fixed,
            },
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self.rho_cap {
            RhoCap::Value(v) => Some(v),
            _ => None,
        }
    }
}

/// Locates where the CNN error curve crosses the SRM+EC curve.
///
/// Over bins nonempty in both curves, `d = cnn - srm` is scanned for sign
/// changes, each located by linear interpolation (runs of exact zeros put
/// the crossing at the middle of the run). The largest crossing where `d`
/// goes from positive to negative wins; failing that, the largest crossing
/// in the other direction. Without any crossing the result is a sentinel.
pub fn find_intersection(cnn: &BinCurve, srm: &BinCurve) -> Result<Threshold> {
    if cnn.binning != srm.binning {
        return Err(Error::IncompatibleBinning);
    }
    let points: Vec<(f64, f64)> = (0..cnn.centers.len())
        .filter_map(|i| match (cnn.mean_error[i], srm.mean_error[i]) {
            (Some(a), Some(b)) => Some((cnn.centers[i], a - b)),
            _ => None,
        })
        .collect();
    if points.len() < 2 {
        return Err(Error::IncompatibleBinning);
    }
    let mut down: Option<f64> = None;
    let mut up: Option<f64> = None;
    let mut prev: Option<usize> = None;
    for (i, &(_, d)) in points.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        if let Some(p) = prev {
            let (x0, d0) = points[p];
            if d0.signum() != d.signum() {
                let x = if i == p + 1 {
                    let x1 = points[i].0;
                    x0 + (x1 - x0) * d0 / (d0 - d)
                } else {
                    0.5 * (points[p + 1].0 + points[i - 1].0)
                };
                if d0 > 0.0 {
                    down = Some(x);
                } else {
                    up = Some(x);
                }
            }
        }
        prev = Some(i);
    }
    let (rho_cap, rule) = match (down, up) {
        (Some(x), _) => (RhoCap::Value(x), CrossingRule::SrmToCnn),
        (None, Some(x)) => (RhoCap::Value(x), CrossingRule::CnnToSrm),
        (None, None) => {
            if points.iter().all(|&(_, d)| d <= 0.0) {
                (RhoCap::AlwaysCnn, CrossingRule::NoCrossing)
            } else {
                (RhoCap::AlwaysSrm, CrossingRule::NoCrossing)
            }
        }
    };
    Ok(Threshold {
        rho_cap,
        provenance: Provenance {
            algorithm: None,
            payload: None,
            metric: MetricKind::RhoBarU,
            cnn_curve: Some(cnn.hash()),
            srm_curve: Some(srm.hash()),
            rule,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    Cnn,
    Srm,
}

/// Below the threshold the SRM+EC answer is used, otherwise the CNN's.
pub fn route(rho_bar: f64, threshold: &Threshold) -> Route {
    match threshold.rho_cap {
        RhoCap::AlwaysCnn => Route::Cnn,
        RhoCap::AlwaysSrm => Route::Srm,
        RhoCap::Value(cap) => {
            if rho_bar < cap {
                Route::Srm
            } else {
                Route::Cnn
            }
        }
    }
}

pub fn select_and_predict(rho_bar: f64, threshold: &Threshold, cnn_pred: u8, srm_pred: u8) -> (u8, Route) {
    match route(rho_bar, threshold) {
        Route::Cnn => (cnn_pred, Route::Cnn),
        Route::Srm => (srm_pred, Route::Srm),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridRecord {
    pub image_id: String,
    pub rho_bar: f64,
    pub cnn_pred: u8,
    pub srm_pred: u8,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridReport {
    pub n_below: usize,
    pub n_above: usize,
    /// SRM+EC error on the images routed to it.
    pub srm_subset_error: Option<f64>,
    /// CNN error on the images routed to it.
    pub cnn_subset_error: Option<f64>,
    pub combined_error: f64,
    pub pure_cnn_error: f64,
    pub pure_srm_error: f64,
    pub warnings: Vec<String>,
}

impl HybridReport {
    /// `|combined - (n_b e_srm + n_a e_cnn) / n|`, zero by construction.
    pub fn decomposition_residual(&self) -> f64 {
        let n = (self.n_below + self.n_above) as f64;
        let rebuilt = (self.n_below as f64 * self.srm_subset_error.unwrap_or(0.0)
            + self.n_above as f64 * self.cnn_subset_error.unwrap_or(0.0))
            / n;
        (self.combined_error - rebuilt).abs()
    }
}

pub fn evaluate_hybrid(records: &[HybridRecord], threshold: &Threshold) -> Result<HybridReport> {
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (mut below, mut above) = ((0usize, 0usize), (0usize, 0usize));
    let (mut cnn_wrong, mut srm_wrong) = (0usize, 0usize);
    for r in records {
        cnn_wrong += usize::from(r.cnn_pred != r.label);
        srm_wrong += usize::from(r.srm_pred != r.label);
        match route(r.rho_bar, threshold) {
            Route::Srm => {
                below.0 += 1;
                below.1 += usize::from(r.srm_pred != r.label);
            }
            Route::Cnn => {
                above.0 += 1;
                above.1 += usize::from(r.cnn_pred != r.label);
            }
        }
    }
    let rate = |(n, wrong): (usize, usize)| (n > 0).then(|| wrong as f64 / n as f64);
    let mut warnings = Vec::new();
    if below.0 == 0 {
        warnings.push("no image routed to SRM+EC".to_string());
    }
    if above.0 == 0 {
        warnings.push("no image routed to the CNN".to_string());
    }
    let n = records.len();
    let (srm_subset_error, cnn_subset_error) = (rate(below), rate(above));
    let combined_error = (below.0 as f64 * srm_subset_error.unwrap_or(0.0)
        + above.0 as f64 * cnn_subset_error.unwrap_or(0.0))
        / n as f64;
    Ok(HybridReport {
        n_below: below.0,
        n_above: above.0,
        srm_subset_error,
        cnn_subset_error,
        combined_error,
        pure_cnn_error: cnn_wrong as f64 / n as f64,
        pure_srm_error: srm_wrong as f64 / n as f64,
        warnings,
    })
}
