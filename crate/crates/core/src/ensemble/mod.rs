//! Random-subspace ensemble of Fisher linear discriminants over rich-model
//! style features.

pub mod cache;
pub mod features;
pub mod fld;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use features::{extract_all, extract_features, FeatureConfig, FeatureVector, ResidualFilter, ScanDirection};
pub use fld::{train_fld, FldLearner, DEFAULT_RIDGE};

pub const DEFAULT_LEARNERS: usize = 51;

pub fn default_subspace(dimension: usize) -> usize {
    dimension.div_ceil(8)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub learners: Vec<FldLearner>,
    pub dimension: usize,
    pub d_sub: usize,
    pub seed: u64,
}

/// Draws `n_learners` subsets of `d_sub` distinct indices up front, then
/// trains one FLD per subset.
pub fn train_ensemble(
    features: &[FeatureVector],
    labels: &[u8],
    n_learners: usize,
    d_sub: usize,
    seed: u64,
) -> Result<EnsembleModel> {
    if features.is_empty() {
        return Err(Error::EmptyInput);
    }
    let dimension = features[0].values.len();
    if features.iter().any(|f| f.values.len() != dimension) {
        return Err(Error::DimensionMismatch("feature vectors differ in length".into()));
    }
    if n_learners == 0 || n_learners % 2 == 0 {
        return Err(Error::InvalidDimension(format!("learner count {n_learners} must be odd")));
    }
    if d_sub == 0 || d_sub > dimension {
        return Err(Error::InvalidDimension(format!("subspace {d_sub} vs dimension {dimension}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subsets: Vec<Vec<usize>> = (0..n_learners)
        .map(|_| {
            let mut s = rand::seq::index::sample(&mut rng, dimension, d_sub).into_vec();
            s.sort_unstable();
            s
        })
        .collect();
    let rows: Vec<&[f64]> = features.iter().map(|f| f.values.as_slice()).collect();
    let learners = subsets
        .par_iter()
        .map(|s| train_fld(&rows, labels, s, DEFAULT_RIDGE))
        .collect::<Result<Vec<_>>>()?;
    Ok(EnsembleModel {
        learners,
        dimension,
        d_sub,
        seed,
    })
}

impl EnsembleModel {
    pub fn decisions(&self, features: &FeatureVector) -> Result<Vec<u8>> {
        if features.values.len() != self.dimension {
            return Err(Error::DimensionMismatch(format!(
                "model expects {} features, got {}",
                self.dimension,
                features.values.len()
            )));
        }
        Ok(self.learners.iter().map(|l| l.decide(&features.values)).collect())
    }
}

/// Majority vote of the base learners.
pub fn predict_ensemble(model: &EnsembleModel, features: &FeatureVector) -> Result<u8> {
    let votes = model.decisions(features)?;
    let ones = votes.iter().filter(|&&v| v == 1).count();
    Ok(u8::from(2 * ones > votes.len()))
}
