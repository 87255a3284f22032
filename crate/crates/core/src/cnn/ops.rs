//! Per-sample tensor kernels on flat `[channel][row][col]` buffers.

use crate::kernels::Padding;

/// Zero-padded "same" cross-correlation, `ks` odd.
/// `kernel` is laid out `[cout][cin][ks][ks]`.
#[allow(clippy::too_many_arguments)]
pub fn conv_forward(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    cout: usize,
    ks: usize,
) -> Vec<f64> {
    let hw = h * w;
    let p = (ks / 2) as isize;
    let mut z = vec![0.0; cout * hw];
    for co in 0..cout {
        let out = &mut z[co * hw..(co + 1) * hw];
        for ci in 0..cin {
            let plane = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..ks {
                let dy = ky as isize - p;
                for kx in 0..ks {
                    let wgt = kernel[((co * cin + ci) * ks + ky) * ks + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - p;
                    let (x_lo, x_hi) = valid_range(w, dx);
                    let (y_lo, y_hi) = valid_range(h, dy);
                    for y in y_lo..y_hi {
                        let yi = (y as isize + dy) as usize;
                        let src = &plane[yi * w..(yi + 1) * w];
                        let dst = &mut out[y * w..(y + 1) * w];
                        let src = &src[(x_lo as isize + dx) as usize..(x_hi as isize + dx) as usize];
                        for (d, s) in dst[x_lo..x_hi].iter_mut().zip(src) {
                            *d += wgt * s;
                        }
                    }
                }
            }
        }
    }
    z
}

/// Output positions `o` with `0 <= o + d < n`.
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo.min(n), hi.max(lo.min(n)))
}

/// Gradient of `conv_forward` with respect to its kernel, accumulated into `dk`.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward_kernel(
    x: &[f64],
    dz: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    ks: usize,
    dk: &mut [f64],
) {
    let hw = h * w;
    let p = (ks / 2) as isize;
    for co in 0..cout {
        let g = &dz[co * hw..(co + 1) * hw];
        for ci in 0..cin {
            let plane = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..ks {
                let dy = ky as isize - p;
                let (y_lo, y_hi) = valid_range(h, dy);
                for kx in 0..ks {
                    let dx = kx as isize - p;
                    let (x_lo, x_hi) = valid_range(w, dx);
                    let mut acc = 0.0;
                    for y in y_lo..y_hi {
                        let yi = (y as isize + dy) as usize;
                        let src = &plane[yi * w + (x_lo as isize + dx) as usize..yi * w + (x_hi as isize + dx) as usize];
                        let gr = &g[y * w + x_lo..y * w + x_hi];
                        acc += gr.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                    }
                    dk[((co * cin + ci) * ks + ky) * ks + kx] += acc;
                }
            }
        }
    }
}

/// Gradient of `conv_forward` with respect to its input.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward_input(
    dz: &[f64],
    kernel: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    ks: usize,
) -> Vec<f64> {
    let hw = h * w;
    let p = (ks / 2) as isize;
    let mut dx_buf = vec![0.0; cin * hw];
    for co in 0..cout {
        let g = &dz[co * hw..(co + 1) * hw];
        for ci in 0..cin {
            let out = &mut dx_buf[ci * hw..(ci + 1) * hw];
            for ky in 0..ks {
                let dy = ky as isize - p;
                let (y_lo, y_hi) = valid_range(h, dy);
                for kx in 0..ks {
                    let wgt = kernel[((co * cin + ci) * ks + ky) * ks + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - p;
                    let (x_lo, x_hi) = valid_range(w, dx);
                    for y in y_lo..y_hi {
                        let yi = (y as isize + dy) as usize;
                        let gr = &g[y * w + x_lo..y * w + x_hi];
                        let dst = &mut out[yi * w + (x_lo as isize + dx) as usize..yi * w + (x_hi as isize + dx) as usize];
                        for (d, s) in dst.iter_mut().zip(gr) {
                            *d += wgt * s;
                        }
                    }
                }
            }
        }
    }
    dx_buf
}

/// Input indices (already folded into range) feeding each pooled output
/// along one axis.
#[derive(Debug, Clone)]
pub struct PoolTable {
    pub out: usize,
    pub window: usize,
    pub taps: Vec<usize>,
}

impl PoolTable {
    pub fn new(n: usize, window: usize, stride: usize, pad: usize) -> Self {
        let out = (n + 2 * pad - window) / stride + 1;
        let mut taps = Vec::with_capacity(out * window);
        for o in 0..out {
            for d in 0..window {
                let i = (o * stride + d) as isize - pad as isize;
                taps.push(Padding::Reflect101.fold(i, n));
            }
        }
        Self { out, window, taps }
    }

    fn taps(&self, o: usize) -> &[usize] {
        &self.taps[o * self.window..(o + 1) * self.window]
    }
}

pub fn avg_pool_forward(t: &[f64], c: usize, h: usize, w: usize, rows: &PoolTable, cols: &PoolTable) -> Vec<f64> {
    let norm = 1.0 / (rows.window * cols.window) as f64;
    let (oh, ow) = (rows.out, cols.out);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &t[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for &y in rows.taps(oy) {
                    let row = &plane[y * w..(y + 1) * w];
                    for &x in cols.taps(ox) {
                        acc += row[x];
                    }
                }
                out[(ch * oh + oy) * ow + ox] = acc * norm;
            }
        }
    }
    out
}

pub fn avg_pool_backward(dout: &[f64], c: usize, h: usize, w: usize, rows: &PoolTable, cols: &PoolTable) -> Vec<f64> {
    let norm = 1.0 / (rows.window * cols.window) as f64;
    let (oh, ow) = (rows.out, cols.out);
    let mut dt = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut dt[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dout[(ch * oh + oy) * ow + ox] * norm;
                for &y in rows.taps(oy) {
                    for &x in cols.taps(ox) {
                        plane[y * w + x] += g;
                    }
                }
            }
        }
    }
    dt
}

pub fn global_pool_forward(t: &[f64], c: usize, hw: usize) -> Vec<f64> {
    (0..c)
        .map(|ch| t[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect()
}

pub fn global_pool_backward(dout: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut dt = vec![0.0; c * hw];
    for ch in 0..c {
        let g = dout[ch] / hw as f64;
        dt[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v = g);
    }
    dt
}

/// Per-channel `(sum, sum of squares around mean)` reduced over a batch in
/// sample order.
pub fn channel_mean_var(batch: &[Vec<f64>], c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (batch.len() * hw) as f64;
    let mut mean = vec![0.0; c];
    for x in batch {
        for ch in 0..c {
            mean[ch] += x[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![0.0; c];
    for x in batch {
        for ch in 0..c {
            let mu = mean[ch];
            var[ch] += x[ch * hw..(ch + 1) * hw].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}
