//! Quantized-residual co-occurrence features.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::kernels::{convolve, kernel_bank, Padding, RealMatrix};

pub const ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualFilter {
    F0,
    H1,
    HorizontalDiff,
    VerticalDiff,
}

impl ResidualFilter {
    pub fn kernel(self) -> RealMatrix {
        match self {
            ResidualFilter::F0 => kernel_bank().f0.clone(),
            ResidualFilter::H1 => kernel_bank().h1.clone(),
            // x[c + 1] - x[c] under true convolution
            ResidualFilter::HorizontalDiff => RealMatrix::from_rows(&[[1.0, -1.0, 0.0]]),
            ResidualFilter::VerticalDiff => RealMatrix::from_rows(&[[1.0], [-1.0], [0.0]]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanDirection {
    Horizontal,
    Vertical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub filters: Vec<ResidualFilter>,
    pub quant_steps: Vec<f64>,
    pub truncation: usize,
    pub directions: Vec<ScanDirection>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            filters: vec![
                ResidualFilter::F0,
                ResidualFilter::H1,
                ResidualFilter::HorizontalDiff,
                ResidualFilter::VerticalDiff,
            ],
            quant_steps: vec![1.0, 2.0],
            truncation: 2,
            directions: vec![ScanDirection::Horizontal, ScanDirection::Vertical],
        }
    }
}

impl FeatureConfig {
    pub fn block_len(&self) -> usize {
        (2 * self.truncation + 1).pow(ORDER as u32)
    }

    pub fn dimension(&self) -> usize {
        self.filters.len() * self.quant_steps.len() * self.directions.len() * self.block_len()
    }

    /// Block offset of `(filter, q, direction)` indices in the vector.
    pub fn block_offset(&self, filter: usize, q: usize, direction: usize) -> usize {
        ((filter * self.quant_steps.len() + q) * self.directions.len() + direction) * self.block_len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters.is_empty() || self.quant_steps.is_empty() || self.directions.is_empty() {
            return Err(Error::InvalidConfig("feature config needs filters, steps and directions".into()));
        }
        if self.quant_steps.iter().any(|q| !(*q > 0.0)) {
            return Err(Error::InvalidConfig("quantization steps must be positive".into()));
        }
        Ok(())
    }

    /// Hex sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("serializable");
        hex::encode(Sha256::digest(json))
    }

    fn min_size(&self) -> usize {
        let k = self
            .filters
            .iter()
            .map(|f| {
                let k = f.kernel();
                k.width().max(k.height())
            })
            .max()
            .unwrap_or(1);
        k.max(ORDER)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub image_id: String,
}

fn quantize(residual: &RealMatrix, q: f64, t: usize) -> Vec<usize> {
    let t_i = t as f64;
    residual
        .values()
        .iter()
        .map(|r| ((r / q).round().clamp(-t_i, t_i) + t_i) as usize)
        .collect()
}

/// Normalized histogram of consecutive `ORDER`-tuples along rows or columns.
fn cooccurrence(symbols: &[usize], width: usize, height: usize, base: usize, direction: ScanDirection, out: &mut [f64]) {
    let (outer, inner, stride_outer, stride_inner) = match direction {
        ScanDirection::Horizontal => (height, width, width, 1),
        ScanDirection::Vertical => (width, height, 1, width),
    };
    if inner < ORDER {
        return;
    }
    let mut count = 0usize;
    for o in 0..outer {
        for i in 0..=inner - ORDER {
            let mut idx = 0;
            for k in 0..ORDER {
                idx = idx * base + symbols[o * stride_outer + (i + k) * stride_inner];
            }
            out[idx] += 1.0;
            count += 1;
        }
    }
    out.iter_mut().for_each(|v| *v /= count as f64);
}

pub fn extract_features(image: &GrayImage, config: &FeatureConfig, image_id: &str) -> Result<FeatureVector> {
    config.validate()?;
    image.ensure_min_size(config.min_size())?;
    let x = image.to_real();
    let (w, h) = (image.width(), image.height());
    let base = 2 * config.truncation + 1;
    let mut values = vec![0.0; config.dimension()];
    for (fi, filter) in config.filters.iter().enumerate() {
        let residual = convolve(&x, &filter.kernel(), Padding::Reflect101);
        for (qi, &q) in config.quant_steps.iter().enumerate() {
            let symbols = quantize(&residual, q, config.truncation);
            for (di, &dir) in config.directions.iter().enumerate() {
                let off = config.block_offset(fi, qi, di);
                cooccurrence(&symbols, w, h, base, dir, &mut values[off..off + config.block_len()]);
            }
        }
    }
    Ok(FeatureVector {
        values,
        image_id: image_id.to_string(),
    })
}

/// Extracts features for many images in parallel, preserving order.
pub fn extract_all(images: &[(String, &GrayImage)], config: &FeatureConfig) -> Result<Vec<FeatureVector>> {
    images
        .par_iter()
        .map(|(id, img)| extract_features(img, config, id))
        .collect()
}
