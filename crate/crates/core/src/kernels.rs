//! Real-valued matrices, mirror-padded 2D convolution and the fixed kernel bank.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Row-major matrix of 64-bit reals. Entries are finite except where a
/// cell deliberately holds the wet sentinel `+inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMatrix {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl RealMatrix {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height} matrix",
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    /// Builds a matrix from equally long rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(width * height);
        for r in rows {
            assert_eq!(r.as_ref().len(), width, "ragged rows");
            values.extend_from_slice(r.as_ref());
        }
        Self {
            width,
            height,
            values,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self {
            width,
            height,
            values,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.width + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.width..(row + 1) * self.width]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> RealMatrix {
        RealMatrix {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Sum of absolute values.
    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }

    /// Element-wise `a*self + b*other`.
    pub fn combine(&self, a: f64, other: &RealMatrix, b: f64) -> Result<RealMatrix> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch("matrix shapes differ".into()));
        }
        Ok(RealMatrix {
            width: self.width,
            height: self.height,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        })
    }

    /// Embeds the matrix in a larger zero matrix, placing the original at
    /// `(top, left)`.
    pub fn zero_pad(&self, top: usize, bottom: usize, left: usize, right: usize) -> RealMatrix {
        let mut out = RealMatrix::zeros(self.width + left + right, self.height + top + bottom);
        for r in 0..self.height {
            for c in 0..self.width {
                out.set(r + top, c + left, self.get(r, c));
            }
        }
        out
    }

    /// Comma-separated rows, for debugging dumps.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.height {
            let line: Vec<String> = self.row(r).iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// How out-of-range reads are folded back into the matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    /// Border sample not repeated: index -1 reads index 1.
    #[default]
    Reflect101,
    /// Border sample repeated: index -1 reads index 0.
    Symmetric,
}

impl Padding {
    /// Maps any integer index onto `[0, n)`.
    pub fn fold(self, index: isize, n: usize) -> usize {
        debug_assert!(n > 0);
        match self {
            Padding::Reflect101 => {
                if n == 1 {
                    return 0;
                }
                let period = 2 * (n as isize - 1);
                let m = index.rem_euclid(period);
                if m >= n as isize {
                    (period - m) as usize
                } else {
                    m as usize
                }
            }
            Padding::Symmetric => {
                let period = 2 * n as isize;
                let m = index.rem_euclid(period);
                if m >= n as isize {
                    (period - 1 - m) as usize
                } else {
                    m as usize
                }
            }
        }
    }
}

pub fn rot180(kernel: &RealMatrix) -> RealMatrix {
    let mut values = kernel.values.clone();
    values.reverse();
    RealMatrix {
        width: kernel.width,
        height: kernel.height,
        values,
    }
}

/// True 2D convolution with reflect-101 border handling; output has the
/// input's shape.
pub fn conv2d_mirror(input: &RealMatrix, kernel: &RealMatrix) -> Result<RealMatrix> {
    conv2d_padded(input, kernel, Padding::Reflect101)
}

pub fn conv2d_padded(input: &RealMatrix, kernel: &RealMatrix, padding: Padding) -> Result<RealMatrix> {
    if kernel.height % 2 == 0 || kernel.width % 2 == 0 {
        return Err(Error::EvenSizedKernel(kernel.height, kernel.width));
    }
    if kernel.height > input.height || kernel.width > input.width {
        return Err(Error::KernelLargerThanInput {
            kernel_h: kernel.height,
            kernel_w: kernel.width,
            input_h: input.height,
            input_w: input.width,
        });
    }
    Ok(convolve(input, kernel, padding))
}

/// Correlation (no kernel flip) with reflect-101 borders.
pub fn correlate2d_mirror(input: &RealMatrix, kernel: &RealMatrix) -> Result<RealMatrix> {
    conv2d_mirror(input, &rot180(kernel))
}

/// Unchecked convolution used by callers that validated sizes themselves.
/// The kernel anchor sits at `(kh/2, kw/2)`. Zero weights are skipped so a
/// wet `+inf` input only propagates through non-zero taps.
pub(crate) fn convolve(input: &RealMatrix, kernel: &RealMatrix, padding: Padding) -> RealMatrix {
    let (h, w) = (input.height, input.width);
    let (kh, kw) = (kernel.height, kernel.width);
    let (ch, cw) = ((kh / 2) as isize, (kw / 2) as isize);
    // padded row t holds input row fold(t - (kh-1-ch))
    let row_off = kh as isize - 1 - ch;
    let col_off = kw as isize - 1 - cw;
    let pw = w + kw - 1;
    let ph = h + kh - 1;
    let col_map: Vec<usize> = (0..pw)
        .map(|u| padding.fold(u as isize - col_off, w))
        .collect();
    let mut padded = vec![0.0; pw * ph];
    for t in 0..ph {
        let src = input.row(padding.fold(t as isize - row_off, h));
        let dst = &mut padded[t * pw..(t + 1) * pw];
        for (d, &c) in dst.iter_mut().zip(&col_map) {
            *d = src[c];
        }
    }

    let mut out = vec![0.0; w * h];
    for m in 0..kh {
        for n in 0..kw {
            let weight = kernel.get(m, n);
            if weight == 0.0 {
                continue;
            }
            for i in 0..h {
                let start = (i + kh - 1 - m) * pw + (kw - 1 - n);
                let src = &padded[start..start + w];
                let dst = &mut out[i * w..(i + 1) * w];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += weight * s;
                }
            }
        }
    }
    RealMatrix {
        width: w,
        height: h,
        values: out,
    }
}

/// Daubechies-8 decomposition low-pass filter (16 taps).
pub const DB8_LOW: [f64; 16] = [
    -0.00011747678412476953,
    0.0006754494064505693,
    -0.00039174037337694705,
    -0.004870352993451574,
    0.008746094047405777,
    0.013981027917398282,
    -0.044088253930794755,
    -0.017369301001807547,
    0.12874742662047847,
    0.0004724845739132828,
    -0.2840155429615469,
    -0.015829105256349306,
    0.5853546836542067,
    0.6756307362972898,
    0.31287159091429995,
    0.05441584224310401,
];

/// Daubechies-8 decomposition high-pass filter, the quadrature mirror of
/// [`DB8_LOW`]: `g[n] = (-1)^(n+1) h[15-n]`.
pub const DB8_HIGH: [f64; 16] = [
    -0.05441584224310401,
    0.31287159091429995,
    -0.6756307362972898,
    0.5853546836542067,
    0.015829105256349306,
    -0.2840155429615469,
    -0.0004724845739132828,
    0.12874742662047847,
    0.017369301001807547,
    -0.044088253930794755,
    -0.013981027917398282,
    0.008746094047405777,
    0.004870352993451574,
    -0.00039174037337694705,
    -0.0006754494064505693,
    -0.00011747678412476953,
];

/// The constant filters used by the cost functions and residual extractors.
#[derive(Debug, Clone)]
pub struct KernelBank {
    /// 5x5 KV high-pass predictor residual, scaled by 1/12.
    pub f0: RealMatrix,
    pub h1: RealMatrix,
    /// 3x3 mean.
    pub l1: RealMatrix,
    /// 5x5 mean.
    pub l2: RealMatrix,
    /// Directional wavelet kernels LH, HL, HH (16x16 each).
    pub wavelets: [RealMatrix; 3],
}

fn outer(col: &[f64; 16], row: &[f64; 16]) -> RealMatrix {
    RealMatrix::from_fn(16, 16, |r, c| col[r] * row[c])
}

pub fn build_kernel_bank() -> KernelBank {
    let kv = [
        [-1.0, 2.0, -2.0, 2.0, -1.0],
        [2.0, -6.0, 8.0, -6.0, 2.0],
        [-2.0, 8.0, -12.0, 8.0, -2.0],
        [2.0, -6.0, 8.0, -6.0, 2.0],
        [-1.0, 2.0, -2.0, 2.0, -1.0],
    ];
    let f0 = RealMatrix::from_rows(&kv).map(|v| v / 12.0);
    let h1 = RealMatrix::from_rows(&[[-1.0, 2.0, -1.0], [2.0, -4.0, 2.0], [-1.0, 2.0, -1.0]]);
    KernelBank {
        f0,
        h1,
        l1: RealMatrix::filled(3, 3, 1.0 / 9.0),
        l2: RealMatrix::filled(5, 5, 1.0 / 25.0),
        wavelets: [
            outer(&DB8_LOW, &DB8_HIGH),
            outer(&DB8_HIGH, &DB8_LOW),
            outer(&DB8_HIGH, &DB8_HIGH),
        ],
    }
}

/// Shared instance of [`build_kernel_bank`].
pub fn kernel_bank() -> &'static KernelBank {
    static BANK: OnceLock<KernelBank> = OnceLock::new();
    BANK.get_or_init(build_kernel_bank)
}

/// F0-filtered image, the CNN input.
pub fn residual_hpf(image: &GrayImage) -> Result<RealMatrix> {
    image.ensure_min_size(5)?;
    conv2d_mirror(&image.to_real(), &kernel_bank().f0)
}

pub const DEFAULT_VARIANCE_WINDOW: usize = 3;
pub const VARIANCE_FLOOR: f64 = 0.01;

/// Per-pixel variance over a mirror-padded `window x window` neighbourhood,
/// floored at `floor`.
pub fn local_variance(image: &GrayImage, window: usize, floor: f64) -> Result<RealMatrix> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::EvenWindow(window));
    }
    image.ensure_min_size(window)?;
    let (w, h) = (image.width(), image.height());
    let r = (window / 2) as isize;
    let n = (window * window) as f64;
    let mut buf = Vec::with_capacity(window * window);
    let mut out = RealMatrix::zeros(w, h);
    for i in 0..h {
        for j in 0..w {
            buf.clear();
            for di in -r..=r {
                let row = Padding::Reflect101.fold(i as isize + di, h);
                for dj in -r..=r {
                    let col = Padding::Reflect101.fold(j as isize + dj, w);
                    buf.push(f64::from(image.get(row, col)));
                }
            }
            let mean = buf.iter().sum::<f64>() / n;
            let var = buf.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            out.set(i, j, var.max(floor));
        }
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Literal convolution: out[i][j] = sum k[m][n] x[refl(i+ch-m)][refl(j+cw-n)].
    pub(crate) fn brute_conv(x: &RealMatrix, k: &RealMatrix) -> RealMatrix {
        let refl = |i: isize, n: usize| -> usize {
            let n = n as isize;
            let mut i = i;
            // bounce off both borders until inside; border sample not repeated
            while i < 0 || i >= n {
                if i < 0 {
                    i = -i;
                }
                if i >= n {
                    i = 2 * (n - 1) - i;
                }
            }
            i as usize
        };
        let (ch, cw) = ((k.height() / 2) as isize, (k.width() / 2) as isize);
        RealMatrix::from_fn(x.width(), x.height(), |i, j| {
            let mut acc = 0.0;
            for m in 0..k.height() {
                for n in 0..k.width() {
                    let a = refl(i as isize + ch - m as isize, x.height());
                    let b = refl(j as isize + cw - n as isize, x.width());
                    acc += k.get(m, n) * x.get(a, b);
                }
            }
            acc
        })
    }

    pub(crate) fn random_matrix(rng: &mut impl Rng, w: usize, h: usize) -> RealMatrix {
        RealMatrix::from_fn(w, h, |_, _| rng.random_range(-1.0..1.0))
    }

    fn max_abs_diff(a: &RealMatrix, b: &RealMatrix) -> f64 {
        a.values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn fold_reflect101_and_symmetric() {
        let r: Vec<usize> = (-3..8).map(|i| Padding::Reflect101.fold(i, 5)).collect();
        assert_eq!(r, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        let s: Vec<usize> = (-3..8).map(|i| Padding::Symmetric.fold(i, 5)).collect();
        assert_eq!(s, vec![2, 1, 0, 0, 1, 2, 3, 4, 4, 3, 2]);
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_matrix(&mut rng, 7, 4);
        let y = conv2d_mirror(&x, &RealMatrix::filled(1, 1, 1.0)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn zero_sum_kernel_kills_constants() {
        let x = RealMatrix::filled(9, 9, 117.0);
        let y = conv2d_mirror(&x, &kernel_bank().h1).unwrap();
        assert!(y.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let (w, h) = (rng.random_range(5..=8), rng.random_range(5..=8));
            let (kw, kh) = (2 * rng.random_range(0..=2) + 1, 2 * rng.random_range(0..=2) + 1);
            let x = random_matrix(&mut rng, w, h);
            let k = random_matrix(&mut rng, kw, kh);
            let got = conv2d_mirror(&x, &k).unwrap();
            assert!(max_abs_diff(&got, &brute_conv(&x, &k)) < 1e-12);
        }
    }

    #[test]
    fn contract_errors() {
        let x = RealMatrix::zeros(4, 4);
        assert!(matches!(
            conv2d_mirror(&x, &RealMatrix::zeros(2, 3)),
            Err(Error::EvenSizedKernel(3, 2))
        ));
        assert!(matches!(
            conv2d_mirror(&x, &RealMatrix::zeros(5, 5)),
            Err(Error::KernelLargerThanInput { .. })
        ));
    }

    #[test]
    fn rot180_cases() {
        let k = RealMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(rot180(&k), RealMatrix::from_rows(&[[4.0, 3.0], [2.0, 1.0]]));
        assert_eq!(rot180(&kernel_bank().h1), kernel_bank().h1);
    }

    #[test]
    fn bank_invariants() {
        let bank = build_kernel_bank();
        assert_eq!(bank.h1.get(1, 1), -4.0);
        assert_eq!(bank.h1.sum(), 0.0);
        assert!(bank.l1.values().iter().all(|&v| v == 1.0 / 9.0));
        assert!((bank.l2.sum() - 1.0).abs() < 1e-15);
        assert!(bank.f0.sum().abs() < 1e-15);
        assert!((bank.f0.get(2, 2) + 1.0).abs() < 1e-15);
        assert!(bank.wavelets[2].sum().abs() < 1e-12);
        for k in &bank.wavelets {
            assert_eq!((k.width(), k.height()), (16, 16));
        }
        // LH is low-pass down the columns, high-pass along the rows
        assert!((bank.wavelets[0].get(13, 2) - DB8_LOW[13] * DB8_HIGH[2]).abs() < 1e-18);
    }

    #[test]
    fn db8_filter_checksums() {
        let low_sum: f64 = DB8_LOW.iter().sum();
        let high_sum: f64 = DB8_HIGH.iter().sum();
        let energy: f64 = DB8_LOW.iter().map(|v| v * v).sum();
        assert!((low_sum - std::f64::consts::SQRT_2).abs() < 1e-12);
        assert!(high_sum.abs() < 1e-12);
        assert!((energy - 1.0).abs() < 1e-12);
        for shift in 1..8 {
            let dot: f64 = (0..16 - 2 * shift)
                .map(|n| DB8_LOW[n] * DB8_LOW[n + 2 * shift])
                .sum();
            assert!(dot.abs() < 1e-12, "shift {shift}: {dot}");
        }
        for n in 0..16 {
            let sign = if n % 2 == 0 { -1.0 } else { 1.0 };
            assert_eq!(DB8_HIGH[n], sign * DB8_LOW[15 - n]);
        }
    }

    #[test]
    fn hpf_impulse_stamps_rotated_f0() {
        let img = GrayImage::from_fn(15, 15, |r, c| if (r, c) == (7, 7) { 12 } else { 0 });
        let res = residual_hpf(&img).unwrap();
        let f0 = rot180(&kernel_bank().f0);
        for r in 0..15 {
            for c in 0..15 {
                let expected = if (5..=9).contains(&r) && (5..=9).contains(&c) {
                    // convolution stamps the kernel itself; rot180(F0) == F0 here
                    12.0 * f0.get(4 - (r - 5), 4 - (c - 5))
                } else {
                    0.0
                };
                assert!((res.get(r, c) - expected).abs() < 1e-12);
            }
        }
        let flat = residual_hpf(&GrayImage::filled(8, 8, 200)).unwrap();
        assert!(flat.values().iter().all(|v| v.abs() < 1e-12));
        assert!(residual_hpf(&GrayImage::filled(4, 9, 0)).is_err());
    }

    #[test]
    fn hpf_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = GrayImage::from_fn(24, 19, |_, _| rng.random());
        let got = residual_hpf(&img).unwrap();
        let want = brute_conv(&img.to_real(), &kernel_bank().f0);
        assert!(max_abs_diff(&got, &want) < 1e-10);
    }

    #[test]
    fn local_variance_cases() {
        let flat = local_variance(&GrayImage::filled(6, 6, 90), 3, VARIANCE_FLOOR).unwrap();
        assert!(flat.values().iter().all(|&v| v == VARIANCE_FLOOR));

        let stripes = GrayImage::from_fn(8, 8, |_, c| if c % 2 == 0 { 0 } else { 255 });
        let var = local_variance(&stripes, 3, VARIANCE_FLOOR).unwrap();
        // window columns {0,255,0} or {255,0,255}, three rows each
        let by_hand = |vals: [f64; 3]| {
            let mean = vals.iter().sum::<f64>() / 3.0;
            vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0
        };
        for r in 1..7 {
            for c in 1..7 {
                let cols = if c % 2 == 0 { [255.0, 0.0, 255.0] } else { [0.0, 255.0, 0.0] };
                assert!((var.get(r, c) - by_hand(cols)).abs() < 1e-9);
            }
        }
        assert!(matches!(
            local_variance(&stripes, 4, VARIANCE_FLOOR),
            Err(Error::EvenWindow(4))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn convolution_is_correlation_with_flipped_kernel(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_matrix(&mut rng, 8, 7);
            let k = random_matrix(&mut rng, 3, 5);
            let a = conv2d_mirror(&x, &k).unwrap();
            let b = correlate2d_mirror(&x, &rot180(&k)).unwrap();
            prop_assert!(max_abs_diff(&a, &b) < 1e-12);
        }

        #[test]
        fn convolution_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_matrix(&mut rng, 8, 8);
            let y = random_matrix(&mut rng, 8, 8);
            let k = random_matrix(&mut rng, 5, 5);
            let lhs = conv2d_mirror(&x.combine(a, &y, b).unwrap(), &k).unwrap();
            let rhs = conv2d_mirror(&x, &k).unwrap()
                .combine(a, &conv2d_mirror(&y, &k).unwrap(), b).unwrap();
            let scale = rhs.values().iter().map(|v| v.abs()).fold(1.0, f64::max);
            prop_assert!(max_abs_diff(&lhs, &rhs) / scale < 1e-9);
        }

        #[test]
        fn rot180_is_an_involution(seed in any::<u64>(), w in 1usize..7, h in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = random_matrix(&mut rng, w, h);
            prop_assert_eq!(rot180(&rot180(&k)), k);
        }

        #[test]
        fn variance_respects_floor_and_translation(seed in any::<u64>(), dr in 0usize..4, dc in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let big = GrayImage::from_fn(20, 20, |_, _| rng.random());
            let var = local_variance(&big, 3, VARIANCE_FLOOR).unwrap();
            prop_assert!(var.values().iter().all(|&v| v >= VARIANCE_FLOOR));
            // shifted crop: interior values agree away from borders
            let crop = GrayImage::from_fn(14, 14, |r, c| big.get(r + dr, c + dc));
            let vc = local_variance(&crop, 3, VARIANCE_FLOOR).unwrap();
            for r in 1..13 {
                for c in 1..13 {
                    prop_assert!((vc.get(r, c) - var.get(r + dr, c + dc)).abs() < 1e-9);
                }
            }
        }
    }
}
