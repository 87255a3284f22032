//! Payload-limited ternary sender: change probabilities from costs or from
//! MiPOD's deflection criterion, and sampling of stego images.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::costs::CostMap;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::kernels::RealMatrix;

pub const LAMBDA_MAX: f64 = 1e6;
pub const MAX_BISECTIONS: usize = 90;
/// Bits per pixel.
pub const DEFAULT_PAYLOAD_TOLERANCE: f64 = 1e-6;

const MAX_BETA: f64 = 1.0 / 3.0;

pub fn max_payload() -> f64 {
    3f64.log2()
}

fn h3(beta: f64) -> f64 {
    if beta <= 0.0 {
        return 0.0;
    }
    let rest = 1.0 - 2.0 * beta;
    let tail = if rest > 0.0 { -rest * rest.log2() } else { 0.0 };
    -2.0 * beta * beta.log2() + tail
}

/// Ternary entropy `h3(b) = -2b log2 b - (1-2b) log2(1-2b)` of a symmetric
/// +-1 change with probability `b` each way.
pub fn ternary_entropy(beta: f64) -> Result<f64> {
    if !(0.0..=MAX_BETA + 1e-12).contains(&beta) {
        return Err(Error::OutOfRange(beta));
    }
    Ok(h3(beta.min(MAX_BETA)))
}

/// Per-pixel probability `beta` of each of the +1 and -1 changes.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeProbMap {
    betas: RealMatrix,
}

impl ChangeProbMap {
    pub fn new(betas: RealMatrix) -> Result<Self> {
        if let Some(&bad) = betas
            .values()
            .iter()
            .find(|b| !(0.0..=MAX_BETA + 1e-12).contains(*b))
        {
            return Err(Error::OutOfRange(bad));
        }
        Ok(Self { betas })
    }

    pub fn uniform(width: usize, height: usize, beta: f64) -> Result<Self> {
        Self::new(RealMatrix::filled(width, height, beta))
    }

    pub fn betas(&self) -> &RealMatrix {
        &self.betas
    }

    /// Total embeddable bits `sum h3(beta_i)`.
    pub fn payload_bits(&self) -> f64 {
        self.betas.values().iter().map(|&b| h3(b)).sum()
    }

    /// Expected number of changed pixels, `2 sum beta_i`.
    pub fn expected_changes(&self) -> f64 {
        2.0 * self.betas.sum()
    }
}

/// Outcome of the multiplier search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagrangeState {
    pub lambda: f64,
    /// Bits over the whole image.
    pub achieved_payload: f64,
    pub target_payload: f64,
    pub iterations: usize,
}

impl LagrangeState {
    pub fn achieved_bpp(&self, pixels: usize) -> f64 {
        self.achieved_payload / pixels as f64
    }
}

fn beta_from_cost(cost: f64, lambda: f64) -> f64 {
    if cost.is_infinite() {
        return 0.0;
    }
    // 1/(exp(l*rho) + 2) == exp(-l*rho) / (1 + 2 exp(-l*rho))
    1.0 / ((lambda * cost).exp() + 2.0)
}

/// Gibbs change probabilities for a fixed multiplier.
pub fn betas_at_lambda(costs: &CostMap, lambda: f64) -> RealMatrix {
    costs.costs.map(|c| beta_from_cost(c, lambda))
}

/// `sum h3(beta_i(lambda))`; non-increasing in lambda.
pub fn payload_at_lambda(costs: &CostMap, lambda: f64) -> f64 {
    costs
        .costs
        .values()
        .iter()
        .map(|&c| h3(beta_from_cost(c, lambda)))
        .sum()
}

fn check_payload(payload: f64) -> Result<()> {
    if !(0.0..=max_payload()).contains(&payload) {
        return Err(Error::PayloadOutOfRange(payload));
    }
    Ok(())
}

/// Finds `lambda` so the sender embeds `payload` bits per pixel, using
/// bisection on `[0, LAMBDA_MAX]`. Wet cells keep `beta = 0`.
pub fn probs_from_costs(
    costs: &CostMap,
    payload: f64,
    tolerance: f64,
) -> Result<(ChangeProbMap, LagrangeState)> {
    check_payload(payload)?;
    let n = costs.costs.len();
    let dry = costs.costs.values().iter().filter(|c| c.is_finite()).count();
    if dry == 0 || payload * n as f64 > dry as f64 * max_payload() + tolerance * n as f64 {
        return Err(Error::PayloadInfeasible);
    }
    let target = payload * n as f64;
    let finish = |lambda: f64, iterations: usize| -> Result<(ChangeProbMap, LagrangeState)> {
        let probs = ChangeProbMap::new(betas_at_lambda(costs, lambda))?;
        let achieved = probs.payload_bits();
        Ok((
            probs,
            LagrangeState {
                lambda,
                achieved_payload: achieved,
                target_payload: target,
                iterations,
            },
        ))
    };

    if payload == 0.0 {
        let probs = ChangeProbMap::new(RealMatrix::zeros(costs.costs.width(), costs.costs.height()))?;
        return Ok((
            probs,
            LagrangeState {
                lambda: LAMBDA_MAX,
                achieved_payload: 0.0,
                target_payload: 0.0,
                iterations: 0,
            },
        ));
    }

    let residual = |lambda: f64| payload_at_lambda(costs, lambda) / n as f64 - payload;
    if residual(0.0).abs() <= tolerance {
        return finish(0.0, 0);
    }
    let (mut lo, mut hi) = (0.0, LAMBDA_MAX);
    let top = residual(hi);
    if top > tolerance {
        return Err(Error::NoConvergence {
            iterations: 0,
            residual: top,
        });
    }
    if top.abs() <= tolerance {
        return finish(hi, 0);
    }
    for it in 1..=MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        let r = residual(mid);
        if r.abs() <= tolerance {
            return finish(mid, it);
        }
        // payload falls as lambda grows
        if r > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::NoConvergence {
        iterations: MAX_BISECTIONS,
        residual: residual(0.5 * (lo + hi)),
    })
}

/// Solves the per-cell stationarity condition
/// `w beta = lambda log2((1 - 2 beta) / beta)` on `(0, 1/3)`.
///
/// Newton runs on `t = ln beta`, where `G(t) = w e^t - lambda log2((1 - 2e^t) / e^t)`
/// is increasing and convex, so iterates that overshoot land right of the
/// root and then descend monotonically. A bracket guards the first step.
fn mipod_cell_beta(weight: f64, lambda: f64, start: f64) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    let k = lambda / std::f64::consts::LN_2;
    let g = |t: f64| {
        let b = t.exp();
        weight * b - k * ((1.0 - 2.0 * b).ln() - t)
    };
    let dg = |t: f64| {
        let b = t.exp();
        weight * b + k * (2.0 * b / (1.0 - 2.0 * b) + 1.0)
    };
    let (mut lo, mut hi) = (f64::MIN_POSITIVE.ln(), MAX_BETA.ln());
    let mut t = if start > 0.0 && start < MAX_BETA { start.ln() } else { (MAX_BETA / 2.0).ln() };
    for _ in 0..200 {
        let v = g(t);
        if v == 0.0 {
            break;
        }
        if v > 0.0 {
            hi = t;
        } else {
            lo = t;
        }
        let delta = v / dg(t);
        let next = t - delta;
        if delta.abs() <= 1e-12 * t.abs().max(1.0) {
            t = next.clamp(lo, hi);
            break;
        }
        if next > lo && next < hi {
            t = next;
        } else {
            t = 0.5 * (lo + hi);
        }
        if hi - lo <= 1e-15 * hi.abs().max(1.0) {
            break;
        }
    }
    t.exp()
}

/// `start` holds warm-start guesses, typically the solution at a nearby lambda.
fn mipod_betas_at(weights: &[f64], lambda: f64, start: Option<&[f64]>) -> Vec<f64> {
    match start {
        Some(s) => weights.iter().zip(s).map(|(&w, &b)| mipod_cell_beta(w, lambda, b)).collect(),
        None => weights.iter().map(|&w| mipod_cell_beta(w, lambda, 0.0)).collect(),
    }
}

/// Fisher-information weighted deflection `sum beta_i^2 / sigma_i^4`.
pub fn deflection(variances: &RealMatrix, probs: &ChangeProbMap) -> f64 {
    variances
        .values()
        .iter()
        .zip(probs.betas().values())
        .map(|(v, b)| b * b / (v * v))
        .sum()
}

/// MiPOD change probabilities: minimize the deflection `sum beta^2 / sigma^4`
/// subject to `sum h3(beta) = payload * n`.
pub fn betas_mipod(variances: &RealMatrix, payload: f64, tolerance: f64) -> Result<ChangeProbMap> {
    betas_mipod_with_state(variances, payload, tolerance).map(|(p, _)| p)
}

pub fn betas_mipod_with_state(
    variances: &RealMatrix,
    payload: f64,
    tolerance: f64,
) -> Result<(ChangeProbMap, LagrangeState)> {
    check_payload(payload)?;
    if let Some(&bad) = variances.values().iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "variances must be positive and finite, found {bad}"
        )));
    }
    let n = variances.len();
    let weights: Vec<f64> = variances.values().iter().map(|v| 1.0 / (v * v)).collect();
    let target = payload * n as f64;
    let bpp = |betas: &[f64]| betas.iter().map(|&b| h3(b)).sum::<f64>() / n as f64;
    let finish = |lambda: f64, betas: Vec<f64>, iterations: usize| {
        let achieved = betas.iter().map(|&b| h3(b)).sum();
        let map = RealMatrix::from_vec(variances.width(), variances.height(), betas)?;
        Ok((
            ChangeProbMap::new(map)?,
            LagrangeState {
                lambda,
                achieved_payload: achieved,
                target_payload: target,
                iterations,
            },
        ))
    };
    if payload == 0.0 {
        return finish(0.0, vec![0.0; n], 0);
    }

    // Payload grows with lambda. Work in u = ln lambda: widen a bracket by
    // doubling steps, then close it with Illinois regula falsi.
    let mut iterations = 0;
    let mut last: Vec<f64> = Vec::new();
    let eval = |u: f64, last: &mut Vec<f64>, iterations: &mut usize| {
        let betas = mipod_betas_at(&weights, u.exp(), (!last.is_empty()).then_some(&last[..]));
        *iterations += 1;
        let r = bpp(&betas) - payload;
        *last = betas;
        r
    };
    let u0 = 0.0;
    let r0 = eval(u0, &mut last, &mut iterations);
    if r0.abs() <= tolerance {
        return finish(1.0, last, iterations);
    }
    let dir = if r0 > 0.0 { -1.0 } else { 1.0 };
    let (mut a, mut ra) = (u0, r0);
    let mut step = 1.0;
    let (mut b, mut rb);
    loop {
        b = a + dir * step;
        rb = eval(b, &mut last, &mut iterations);
        if rb.abs() <= tolerance {
            return finish(b.exp(), last, iterations);
        }
        if rb.signum() != ra.signum() {
            break;
        }
        a = b;
        ra = rb;
        step *= 2.0;
        if step > 4096.0 {
            return Err(Error::NoConvergence {
                iterations,
                residual: rb,
            });
        }
    }
    // keep ra < 0 < rb
    if ra > 0.0 {
        std::mem::swap(&mut a, &mut b);
        std::mem::swap(&mut ra, &mut rb);
    }
    let mut side = 0i8;
    for _ in 0..MAX_BISECTIONS * 2 {
        let mut u = b - rb * (b - a) / (rb - ra);
        if !(u > a.min(b) && u < a.max(b)) {
            u = 0.5 * (a + b);
        }
        let r = eval(u, &mut last, &mut iterations);
        if r.abs() <= tolerance {
            return finish(u.exp(), last, iterations);
        }
        if r < 0.0 {
            a = u;
            ra = r;
            if side == -1 {
                rb *= 0.5;
            }
            side = -1;
        } else {
            b = u;
            rb = r;
            if side == 1 {
                ra *= 0.5;
            }
            side = 1;
        }
        if (b - a).abs() <= 1e-15 * a.abs().max(b.abs()).max(1.0) {
            break;
        }
    }
    let betas = mipod_betas_at(&weights, b.exp(), None);
    Err(Error::NoConvergence {
        iterations,
        residual: bpp(&betas) - payload,
    })
}

/// Samples a stego image: each pixel independently moves +1 with
/// probability beta, -1 with probability beta. Draws come from a ChaCha
/// keystream addressed by pixel index, so the result does not depend on
/// traversal order. A +1 at 255 becomes -1 and a -1 at 0 becomes +1.
pub fn simulate_embedding(cover: &GrayImage, probs: &ChangeProbMap, seed: u64) -> Result<GrayImage> {
    let betas = probs.betas();
    if betas.width() != cover.width() || betas.height() != cover.height() {
        return Err(Error::DimensionMismatch(format!(
            "cover {}x{} vs probabilities {}x{}",
            cover.width(),
            cover.height(),
            betas.width(),
            betas.height()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = cover.pixels().to_vec();
    for (index, (px, &beta)) in pixels.iter_mut().zip(betas.values()).enumerate() {
        rng.set_word_pos(2 * index as u128);
        let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let delta: i16 = if u < beta {
            1
        } else if u < 2.0 * beta {
            -1
        } else {
            0
        };
        let value = i16::from(*px);
        *px = match value + delta {
            256 => 254,
            -1 => 1,
            v => v as u8,
        };
    }
    GrayImage::new(cover.width(), cover.height(), pixels)
}

pub fn count_changes(cover: &GrayImage, stego: &GrayImage) -> usize {
    cover
        .pixels()
        .iter()
        .zip(stego.pixels())
        .filter(|(a, b)| a != b)
        .count()
}
