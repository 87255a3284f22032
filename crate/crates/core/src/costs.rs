//! Embedding distortion costs (S-UNIWARD, HILL, MiPOD) and the scalar image
//! metrics derived from them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embed::{betas_mipod, DEFAULT_PAYLOAD_TOLERANCE};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::kernels::{
    convolve, kernel_bank, local_variance, rot180, Padding, RealMatrix, DEFAULT_VARIANCE_WINDOW,
    VARIANCE_FLOOR,
};

/// Wet-cost sentinel: a pixel that must never change.
pub const WET: f64 = f64::INFINITY;

/// Stabilizing constant of the S-UNIWARD denominator.
pub const DEFAULT_SIGMA: f64 = 1.0;

/// HILL costs at or above this value are left out of the mean.
pub const DEFAULT_HILL_CUTOFF: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    #[serde(rename = "uniward")]
    SUniward,
    Hill,
    #[serde(rename = "mipod")]
    MiPod,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::SUniward, Algorithm::MiPod, Algorithm::Hill];

    /// Spelling used in corpus manifests.
    pub fn manifest_name(self) -> &'static str {
        match self {
            Algorithm::SUniward => "S-UNIWARD",
            Algorithm::Hill => "HILL",
            Algorithm::MiPod => "MiPOD",
        }
    }

    pub fn from_manifest_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.manifest_name() == name)
    }

    pub fn cli_name(self) -> &'static str {
        match self {
            Algorithm::SUniward => "uniward",
            Algorithm::Hill => "hill",
            Algorithm::MiPod => "mipod",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.manifest_name())
    }
}

impl FromStr for Algorithm {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|a| a.cli_name() == s.to_ascii_lowercase() || a.manifest_name() == s)
            .ok_or_else(|| format!("unknown algorithm {s:?} (expected uniward, hill or mipod)"))
    }
}

/// Per-pixel cost of a +-1 change. Entries are `>= 0`; `+inf` marks wet cells.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMap {
    pub algorithm: Algorithm,
    pub costs: RealMatrix,
}

impl CostMap {
    pub fn wet_count(&self) -> usize {
        self.costs.values().iter().filter(|v| v.is_infinite()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    RhoBarU,
    RhoBarH,
    RhoBarM,
    Entropy,
}

impl MetricKind {
    pub fn of_algorithm(algorithm: Algorithm) -> Self {
        match algorithm {
            Algorithm::SUniward => MetricKind::RhoBarU,
            Algorithm::Hill => MetricKind::RhoBarH,
            Algorithm::MiPod => MetricKind::RhoBarM,
        }
    }

    pub fn column_name(self) -> &'static str {
        match self {
            MetricKind::RhoBarU => "rho_bar_U",
            MetricKind::RhoBarH => "rho_bar_H",
            MetricKind::RhoBarM => "rho_bar_M",
            MetricKind::Entropy => "entropy",
        }
    }
}

impl FromStr for MetricKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rho_bar_U" | "rho_u" | "u" => Ok(MetricKind::RhoBarU),
            "rho_bar_H" | "rho_h" | "h" => Ok(MetricKind::RhoBarH),
            "rho_bar_M" | "rho_m" | "m" => Ok(MetricKind::RhoBarM),
            "entropy" => Ok(MetricKind::Entropy),
            other => Err(format!("unknown metric {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub kind: MetricKind,
    pub value: f64,
}

/// Pads an even-sized wavelet kernel with a trailing zero row and column so
/// the generic odd-kernel convolution reproduces `same`-mode anchoring at
/// `(k/2, k/2)`. Rotating the padded kernel then puts the zero row first,
/// which keeps the backward (cost) convolution aligned with the forward one.
fn pad_even_kernel(kernel: &RealMatrix) -> RealMatrix {
    let bottom = usize::from(kernel.height() % 2 == 0);
    let right = usize::from(kernel.width() % 2 == 0);
    kernel.zero_pad(0, bottom, 0, right)
}

/// S-UNIWARD costs: `sum_k (1 / (|X * K_k| + sigma)) * rot180(|K_k|)`.
pub fn cost_uniward(image: &GrayImage, sigma: f64) -> Result<CostMap> {
    image.ensure_min_size(16)?;
    if !(sigma > 0.0) {
        return Err(Error::InvalidConfig(format!("sigma must be positive, got {sigma}")));
    }
    let x = image.to_real();
    let mut total = RealMatrix::zeros(image.width(), image.height());
    for k in &kernel_bank().wavelets {
        let k = pad_even_kernel(k);
        let response = convolve(&x, &k, Padding::Reflect101);
        let weights = response.map(|r| 1.0 / (r.abs() + sigma));
        let spread = convolve(&weights, &rot180(&k.map(f64::abs)), Padding::Reflect101);
        total = total.combine(1.0, &spread, 1.0)?;
    }
    Ok(CostMap {
        algorithm: Algorithm::SUniward,
        costs: total,
    })
}

/// HILL costs: `(1 / (|X * H1| * L1)) * L2`, with zero denominators wet.
pub fn cost_hill(image: &GrayImage) -> Result<CostMap> {
    image.ensure_min_size(5)?;
    let bank = kernel_bank();
    let residual = convolve(&image.to_real(), &bank.h1, Padding::Reflect101).map(f64::abs);
    let smoothed = convolve(&residual, &bank.l1, Padding::Reflect101);
    let inverse = smoothed.map(|s| if s == 0.0 { WET } else { 1.0 / s });
    let costs = convolve(&inverse, &bank.l2, Padding::Reflect101);
    Ok(CostMap {
        algorithm: Algorithm::Hill,
        costs,
    })
}

/// `ln(1/beta - 2)`, clamped at 0 for `beta` at (or numerically past) 1/3.
pub fn mipod_cost_from_beta(beta: f64) -> f64 {
    if beta <= 0.0 {
        return WET;
    }
    (1.0 / beta - 2.0).max(1.0).ln()
}

/// MiPOD costs from the deflection-minimizing change probabilities.
pub fn cost_mipod(image: &GrayImage, payload: f64) -> Result<CostMap> {
    if !(payload > 0.0 && payload <= 3f64.log2()) {
        return Err(Error::PayloadOutOfRange(payload));
    }
    let variances = local_variance(image, DEFAULT_VARIANCE_WINDOW, VARIANCE_FLOOR)?;
    let betas = betas_mipod(&variances, payload, DEFAULT_PAYLOAD_TOLERANCE)?;
    Ok(CostMap {
        algorithm: Algorithm::MiPod,
        costs: betas.betas().map(mipod_cost_from_beta),
    })
}

pub fn cost_for(algorithm: Algorithm, image: &GrayImage, payload: f64) -> Result<CostMap> {
    match algorithm {
        Algorithm::SUniward => cost_uniward(image, DEFAULT_SIGMA),
        Algorithm::Hill => cost_hill(image),
        Algorithm::MiPod => cost_mipod(image, payload),
    }
}

/// Mean over entries strictly below `cutoff`; wet cells never count.
pub fn mean_cost(costs: &CostMap, cutoff: f64) -> Result<MetricValue> {
    let (sum, n) = costs
        .costs
        .values()
        .iter()
        .filter(|&&v| v.is_finite() && v < cutoff)
        .fold((0.0, 0usize), |(s, n), &v| (s + v, n + 1));
    if n == 0 {
        return Err(Error::AllEntriesExcluded);
    }
    Ok(MetricValue {
        kind: MetricKind::of_algorithm(costs.algorithm),
        value: sum / n as f64,
    })
}

/// Cutoff applied when averaging a map of the given algorithm: only HILL
/// maps contain near-singular values.
pub fn default_cutoff(algorithm: Algorithm) -> f64 {
    match algorithm {
        Algorithm::Hill => DEFAULT_HILL_CUTOFF,
        _ => f64::INFINITY,
    }
}

/// Shannon entropy of the 256-bin intensity histogram, in bits.
pub fn shannon_entropy(image: &GrayImage) -> MetricValue {
    let mut hist = [0usize; 256];
    for &p in image.pixels() {
        hist[p as usize] += 1;
    }
    let n = image.pixels().len() as f64;
    let value = hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum::<f64>()
        .max(0.0);
    MetricValue {
        kind: MetricKind::Entropy,
        value,
    }
}

/// Equidistant partition of `[lo, hi]`. Bins are left-closed right-open
/// except the last, which is closed; out-of-range values clamp to the end bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    pub lo: f64,
    pub hi: f64,
    pub n_bins: usize,
}

impl Binning {
    pub fn new(lo: f64, hi: f64, n_bins: usize) -> Result<Self> {
        if !(lo < hi) || n_bins < 2 || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::EmptyRange { lo, hi });
        }
        Ok(Self { lo, hi, n_bins })
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.n_bins as f64
    }

    pub fn bin_of(&self, value: f64) -> usize {
        if value >= self.hi {
            return self.n_bins - 1;
        }
        let idx = ((value - self.lo) / self.width()).floor();
        if idx <= 0.0 || idx.is_nan() {
            0
        } else {
            (idx as usize).min(self.n_bins - 1)
        }
    }

    pub fn centers(&self) -> Vec<f64> {
        let w = self.width();
        (0..self.n_bins)
            .map(|b| self.lo + (b as f64 + 0.5) * w)
            .collect()
    }
}

/// Bin assignment for a set of per-image metric values.
#[derive(Debug, Clone, PartialEq)]
pub struct BinAssignment {
    pub binning: Binning,
    pub bins: Vec<(String, usize)>,
}

pub fn bin_values(values: &[(String, f64)], lo: f64, hi: f64, n_bins: usize) -> Result<BinAssignment> {
    let binning = Binning::new(lo, hi, n_bins)?;
    Ok(BinAssignment {
        binning,
        bins: values
            .iter()
            .map(|(id, v)| (id.clone(), binning.bin_of(*v)))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::kernels::tests::brute_conv;

    fn noise(seed: u64, w: usize, h: usize) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayImage::from_fn(w, h, |_, _| rng.random())
    }

    #[test]
    fn uniward_on_constant_image_is_sum_of_kernel_norms() {
        let img = GrayImage::filled(32, 32, 77);
        let sigma = 0.5;
        let map = cost_uniward(&img, sigma).unwrap();
        let norms: f64 = kernel_bank().wavelets.iter().map(|k| k.l1_norm()).sum();
        for &v in map.costs.values() {
            assert!((v - norms / sigma).abs() < 1e-9, "{v} vs {}", norms / sigma);
        }
    }

    #[test]
    fn uniward_is_positive_and_finite() {
        let map = cost_uniward(&noise(4, 20, 17), DEFAULT_SIGMA).unwrap();
        assert!(map.costs.values().iter().all(|&v| v > 0.0 && v.is_finite()));
        assert!(matches!(
            cost_uniward(&GrayImage::filled(15, 30, 0), 1.0),
            Err(Error::ImageTooSmall { min: 16, .. })
        ));
    }

    /// Cost of pixel p summed directly over every wavelet coefficient that a
    /// change at p touches: sum_i |K[i-p+8]| / (|R_i| + sigma), read through
    /// the same reflected borders.
    fn uniward_by_definition(img: &GrayImage, sigma: f64) -> RealMatrix {
        let x = img.to_real();
        let (w, h) = (img.width() as isize, img.height() as isize);
        let mut total = RealMatrix::zeros(img.width(), img.height());
        for k in &kernel_bank().wavelets {
            // R_i = sum_m K[m] x[i + 8 - m]
            let r = RealMatrix::from_fn(img.width(), img.height(), |i, j| {
                let mut acc = 0.0;
                for m in 0..16isize {
                    for n in 0..16isize {
                        let a = Padding::Reflect101.fold(i as isize + 8 - m, h as usize);
                        let b = Padding::Reflect101.fold(j as isize + 8 - n, w as usize);
                        acc += k.get(m as usize, n as usize) * x.get(a, b);
                    }
                }
                acc
            });
            for pi in 0..h {
                for pj in 0..w {
                    let mut acc = 0.0;
                    // coefficient i sees pixel p through tap m = i + 8 - p
                    for m in 0..16isize {
                        for n in 0..16isize {
                            let i = Padding::Reflect101.fold(pi + m - 8, h as usize);
                            let j = Padding::Reflect101.fold(pj + n - 8, w as usize);
                            acc += k.get(m as usize, n as usize).abs() / (r.get(i, j).abs() + sigma);
                        }
                    }
                    let cur = total.get(pi as usize, pj as usize);
                    total.set(pi as usize, pj as usize, cur + acc);
                }
            }
        }
        total
    }

    #[test]
    fn uniward_matches_definition() {
        let img = noise(9, 40, 40);
        let got = cost_uniward(&img, 1.0).unwrap();
        let want = uniward_by_definition(&img, 1.0);
        for r in 0..40 {
            for c in 0..40 {
                let (a, b) = (got.costs.get(r, c), want.get(r, c));
                assert!((a - b).abs() < 1e-9 * b, "({r},{c}) {a} vs {b}");
            }
        }
    }

    #[test]
    fn hill_constant_image_is_all_wet() {
        let map = cost_hill(&GrayImage::filled(10, 10, 128)).unwrap();
        assert_eq!(map.wet_count(), 100);
        assert!(matches!(
            mean_cost(&map, DEFAULT_HILL_CUTOFF),
            Err(Error::AllEntriesExcluded)
        ));
    }

    #[test]
    fn hill_matches_three_stage_oracle() {
        let img = noise(5, 8, 8);
        let bank = kernel_bank();
        let s1 = brute_conv(&img.to_real(), &bank.h1).map(f64::abs);
        let s2 = brute_conv(&s1, &bank.l1).map(|v| 1.0 / v);
        let want = brute_conv(&s2, &bank.l2);
        let got = cost_hill(&img).unwrap();
        for (a, b) in got.costs.values().iter().zip(want.values()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn hill_orders_smooth_above_textured() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let slope: f64 = rng.random_range(0.3..1.5);
            let offset: f64 = rng.random_range(0.0..40.0);
            let smooth = GrayImage::from_fn(32, 32, |r, c| {
                // diagonal ramp plus gentle curvature, never constant
                (offset + slope * (r + c) as f64 + 0.02 * ((r * c) as f64)).min(255.0) as u8
            });
            let textured = noise(rng.random(), 32, 32);
            let smooth_mean = mean_cost(&cost_hill(&smooth).unwrap(), DEFAULT_HILL_CUTOFF).unwrap();
            let tex_mean = mean_cost(&cost_hill(&textured).unwrap(), DEFAULT_HILL_CUTOFF).unwrap();
            assert!(smooth_mean.value > 10.0 * tex_mean.value);
            assert!(smooth_mean.value.is_finite());
        }
    }

    #[test]
    fn mipod_cost_substitution() {
        assert!((mipod_cost_from_beta(0.25) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(mipod_cost_from_beta(1.0 / 3.0), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10_000 {
            let beta: f64 = rng.random_range(1e-9..=1.0 / 3.0);
            let back = 1.0 / (mipod_cost_from_beta(beta).exp() + 2.0);
            assert!((back - beta).abs() < 1e-12);
        }
    }

    #[test]
    fn mipod_costs_nonnegative() {
        let map = cost_mipod(&noise(2, 24, 24), 0.4).unwrap();
        assert!(map.costs.values().iter().all(|&v| v >= 0.0 && v.is_finite()));
        assert!(matches!(
            cost_mipod(&noise(2, 24, 24), 1.7),
            Err(Error::PayloadOutOfRange(_))
        ));
        assert!(cost_mipod(&noise(2, 24, 24), 0.0).is_err());
    }

    #[test]
    fn mean_cost_exclusion() {
        let five = CostMap {
            algorithm: Algorithm::SUniward,
            costs: RealMatrix::filled(3, 3, 5.0),
        };
        assert_eq!(mean_cost(&five, f64::INFINITY).unwrap().value, 5.0);
        let mixed = CostMap {
            algorithm: Algorithm::Hill,
            costs: RealMatrix::from_rows(&[[1.0, 2.0, WET]]),
        };
        let m = mean_cost(&mixed, 1e6).unwrap();
        assert_eq!(m.value, 1.5);
        assert_eq!(m.kind, MetricKind::RhoBarH);
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(shannon_entropy(&GrayImage::filled(7, 7, 3)).value, 0.0);
        let half = GrayImage::from_fn(8, 8, |r, _| if r < 4 { 0 } else { 255 });
        assert_eq!(shannon_entropy(&half).value, 1.0);
        let uniform = GrayImage::from_fn(16, 16, |r, c| (r * 16 + c) as u8);
        assert_eq!(shannon_entropy(&uniform).value, 8.0);
    }

    #[test]
    fn entropy_binning() {
        let values = vec![
            ("a".to_string(), 0.7),
            ("b".to_string(), 8.0),
            ("c".to_string(), 0.0),
            ("d".to_string(), 9.3),
            ("e".to_string(), 0.7 + 0.292 * 3.5),
        ];
        let assigned = bin_values(&values, 0.7, 8.0, 25).unwrap();
        assert!((assigned.binning.width() - 0.292).abs() < 1e-12);
        let bins: Vec<usize> = assigned.bins.iter().map(|(_, b)| *b).collect();
        assert_eq!(bins, vec![0, 24, 0, 24, 3]);
        assert!(bin_values(&values, 1.0, 1.0, 25).is_err());
        assert!(bin_values(&values, 0.0, 1.0, 1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn entropy_is_permutation_invariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let levels = rng.random_range(1..=256u32);
            let img = GrayImage::from_fn(20, 20, |_, _| rng.random_range(0..levels) as u8);
            let mut shuffled = img.pixels().to_vec();
            shuffled.shuffle(&mut rng);
            let perm = GrayImage::new(20, 20, shuffled).unwrap();
            let (a, b) = (shannon_entropy(&img).value, shannon_entropy(&perm).value);
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=8.0).contains(&a));
        }

        #[test]
        fn mean_cost_monotone_in_cutoff(seed in any::<u64>(), c1 in 0.1f64..10.0, dc in 0.0f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let map = CostMap {
                algorithm: Algorithm::SUniward,
                costs: RealMatrix::from_fn(6, 6, |_, _| rng.random_range(0.0..12.0)),
            };
            let floor = map.costs.values().iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assume!(floor < c1);
            let lo = mean_cost(&map, c1).unwrap().value;
            let hi = mean_cost(&map, c1 + dc).unwrap().value;
            prop_assert!(hi >= lo - 1e-12);
        }
    }
}
