//! Synthetic covers: smoothed noise fields with per-image texture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::image::GrayImage;
use crate::kernels::{convolve, Padding, RealMatrix};

fn noise(rng: &mut ChaCha8Rng, size: usize) -> RealMatrix {
    RealMatrix::from_fn(size, size, |_, _| StandardNormal.sample(rng))
}

fn blur(mut m: RealMatrix, passes: usize) -> RealMatrix {
    let box3 = RealMatrix::filled(3, 3, 1.0 / 9.0);
    for _ in 0..passes {
        m = convolve(&m, &box3, Padding::Reflect101);
    }
    m
}

fn standardize(m: &RealMatrix) -> RealMatrix {
    let n = m.len() as f64;
    let mean = m.sum() / n;
    let sd = (m.values().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    m.map(|v| if sd > 0.0 { (v - mean) / sd } else { 0.0 })
}

fn quantize(m: &RealMatrix) -> GrayImage {
    let pixels = m.values().iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    GrayImage::new(m.width(), m.height(), pixels).expect("nonempty")
}

/// Heavily smoothed noise with almost no fine texture.
pub fn synth_smooth_cover(size: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = standardize(&blur(noise(&mut rng, size), 6));
    let amplitude = rng.random_range(15.0..40.0);
    let base = rng.random_range(90.0..160.0);
    quantize(&field.map(|v| base + amplitude * v))
}

/// Smoothed low-frequency content plus a textured component whose strength
/// varies from near-flat to busy across seeds, so per-image cost levels
/// spread over a wide range. Part of each image may be masked flat.
pub fn synth_cover(size: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let passes = rng.random_range(2..7);
    let smooth = standardize(&blur(noise(&mut rng, size), passes));
    let fine_passes = rng.random_range(0..2);
    let fine = standardize(&blur(noise(&mut rng, size), fine_passes));
    let amplitude = rng.random_range(10.0..50.0);
    // log-uniform texture strength in gray levels
    let texture = (rng.random_range(0.3f64.ln()..20f64.ln())).exp();
    let base = rng.random_range(70.0..180.0);
    let flat_fraction: f64 = if rng.random_bool(0.3) { rng.random_range(0.2..0.7) } else { 0.0 };
    let cut = (flat_fraction * size as f64) as usize;
    let mut out = RealMatrix::zeros(size, size);
    for r in 0..size {
        for c in 0..size {
            let t = if c < cut { 0.1 * texture } else { texture };
            out.set(r, c, base + amplitude * smooth.get(r, c) + t * fine.get(r, c));
        }
    }
    quantize(&out)
}
