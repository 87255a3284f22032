//! Fisher linear discriminant on a feature subset.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative ridge added to the within-class scatter, scaled by its mean
/// diagonal.
pub const DEFAULT_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FldLearner {
    pub subset: Vec<usize>,
    pub weights: Vec<f64>,
    pub threshold: f64,
    /// Class means coincided; the learner always answers 0.
    pub degenerate: bool,
}

impl FldLearner {
    pub fn project(&self, x: &[f64]) -> f64 {
        self.subset.iter().zip(&self.weights).map(|(&i, w)| w * x[i]).sum()
    }

    pub fn decide(&self, x: &[f64]) -> u8 {
        u8::from(self.project(x) > self.threshold)
    }
}

/// Trains on `rows` restricted to `subset`. The direction is
/// `(S_w + r I)^-1 (mu_1 - mu_0)` with `S_w` the summed class scatter and
/// `r = ridge * trace(S_w) / |subset|`. When there are fewer samples than
/// dimensions the solve goes through the Woodbury identity on the
/// sample-space Gram matrix instead.
pub fn train_fld(rows: &[&[f64]], labels: &[u8], subset: &[usize], ridge: f64) -> Result<FldLearner> {
    if rows.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!("{} rows, {} labels", rows.len(), labels.len())));
    }
    let d = subset.len();
    if d == 0 {
        return Err(Error::InvalidDimension("empty subset".into()));
    }
    let n1 = labels.iter().filter(|&&y| y == 1).count();
    let n0 = labels.len() - n1;
    if n0 == 0 || n1 == 0 {
        return Err(Error::MissingClass);
    }
    let n = rows.len();
    let x = DMatrix::from_fn(n, d, |r, c| rows[r][subset[c]]);
    let mut mu = [DVector::zeros(d), DVector::zeros(d)];
    for (r, &y) in labels.iter().enumerate() {
        mu[y as usize] += x.row(r).transpose();
    }
    mu[0] /= n0 as f64;
    mu[1] /= n1 as f64;
    let diff = &mu[1] - &mu[0];
    let midpoint = (&mu[0] + &mu[1]) * 0.5;
    if diff.iter().all(|v| *v == 0.0) {
        return Ok(FldLearner {
            subset: subset.to_vec(),
            weights: vec![0.0; d],
            threshold: 0.0,
            degenerate: true,
        });
    }
    let mut centered = x;
    for (r, &y) in labels.iter().enumerate() {
        let m = &mu[y as usize];
        for c in 0..d {
            centered[(r, c)] -= m[c];
        }
    }
    let trace: f64 = centered.iter().map(|v| v * v).sum();
    let reg = if trace > 0.0 { ridge * trace / d as f64 } else { ridge };

    let w = if n < d {
        // (rI + C^T C)^-1 v = (v - C^T (rI + C C^T)^-1 C v) / r
        let mut gram = &centered * centered.transpose();
        for i in 0..n {
            gram[(i, i)] += reg;
        }
        let chol = gram.cholesky().ok_or(Error::SingularScatter)?;
        let cv = &centered * &diff;
        let inner = chol.solve(&cv);
        (&diff - centered.transpose() * inner) / reg
    } else {
        let mut scatter = centered.transpose() * &centered;
        for i in 0..d {
            scatter[(i, i)] += reg;
        }
        scatter.cholesky().ok_or(Error::SingularScatter)?.solve(&diff)
    };
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularScatter);
    }
    let threshold = w.dot(&midpoint);
    Ok(FldLearner {
        subset: subset.to_vec(),
        weights: w.iter().copied().collect(),
        threshold,
        degenerate: false,
    })
}
