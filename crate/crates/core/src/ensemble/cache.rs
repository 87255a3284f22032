//! Binary feature cache keyed by the feature-config hash.
//!
//! Layout: magic, 64 hex bytes of config hash, u64 dimension, u64 count,
//! then per record a u32-prefixed UTF-8 id followed by f64 values.

use std::path::Path;

use super::features::{FeatureConfig, FeatureVector};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HYSTFEAT";

pub fn encode(config: &FeatureConfig, features: &[FeatureVector]) -> Result<Vec<u8>> {
    let dim = config.dimension();
    let mut out = Vec::with_capacity(96 + features.len() * (dim * 8 + 16));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(config.hash().as_bytes());
    out.extend_from_slice(&(dim as u64).to_le_bytes());
    out.extend_from_slice(&(features.len() as u64).to_le_bytes());
    for f in features {
        if f.values.len() != dim {
            return Err(Error::DimensionMismatch(format!("{} has {} features, config says {dim}", f.image_id, f.values.len())));
        }
        out.extend_from_slice(&(f.image_id.len() as u32).to_le_bytes());
        out.extend_from_slice(f.image_id.as_bytes());
        for v in &f.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(config: &FeatureConfig, bytes: &[u8]) -> Result<Vec<FeatureVector>> {
    let bad = |m: &str| Error::FeatureCache(m.to_string());
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(bad("truncated"));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    if take(8)? != MAGIC {
        return Err(bad("bad magic"));
    }
    if take(64)? != config.hash().as_bytes() {
        return Err(bad("feature configuration changed"));
    }
    let dim = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    if dim != config.dimension() {
        return Err(bad("dimension mismatch"));
    }
    let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let image_id = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("id is not UTF-8"))?;
        let raw = take(dim * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push(FeatureVector { values, image_id });
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, config: &FeatureConfig, features: &[FeatureVector]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(config, features)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>, config: &FeatureConfig) -> Result<Vec<FeatureVector>> {
    let path = path.as_ref();
    decode(config, &std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
