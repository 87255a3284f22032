//! Steganalysis toolkit: content-adaptive embedding costs, a payload-limited
//! ternary sender, a CNN detector, a rich-model FLD ensemble and a selector
//! that routes each image to the detector expected to do better on it.

pub mod cnn;
pub mod costs;
pub mod embed;
pub mod ensemble;
pub mod error;
pub mod hybrid;
pub mod image;
pub mod kernels;
pub mod synth;

pub use costs::{Algorithm, Binning, CostMap, MetricKind, MetricValue};
pub use embed::{ChangeProbMap, LagrangeState};
pub use error::{Error, Result};
pub use hybrid::{BinCurve, HybridRecord, HybridReport, Route, Threshold};
pub use image::{CorpusManifest, GrayImage, ManifestEntry, PairSplit, Role};
pub use kernels::RealMatrix;
