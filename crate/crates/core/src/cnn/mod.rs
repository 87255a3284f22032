//! Residual-domain CNN detector: convolution, optional ABS, batch
//! normalization, Tanh/ReLU, average pooling, then a two-way softmax.

pub mod checkpoint;
pub mod ops;
pub mod train;
pub mod vote;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::RealMatrix;
use ops::PoolTable;

pub use train::{train, EpochStats, SnapshotRing, TrainOutcome, TrainSpec};
pub use vote::{aggregate_over_cnns, majority_vote, vote_snapshot, VoteRule};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Mirror-padded sliding mean.
    Average { window: usize, stride: usize, pad: usize },
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub activation: Activation,
    pub abs: bool,
    pub pool: Pooling,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub input_size: usize,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Desk,
}

const HALVING: Pooling = Pooling::Average {
    window: 5,
    stride: 2,
    pad: 2,
};

impl CnnConfig {
    fn five_layers(input_size: usize, maps: [usize; 5]) -> Self {
        let acts = [
            Activation::Tanh,
            Activation::Tanh,
            Activation::Relu,
            Activation::Relu,
            Activation::Relu,
        ];
        let kernels = [5, 5, 1, 1, 1];
        let layers = (0..5)
            .map(|i| LayerSpec {
                out_channels: maps[i],
                kernel: kernels[i],
                activation: acts[i],
                abs: i == 0,
                pool: if i == 4 { Pooling::Global } else { HALVING },
            })
            .collect();
        Self { input_size, layers }
    }

    /// 512x512 input, maps 8/16/32/64/128.
    pub fn paper() -> Self {
        Self::five_layers(512, [8, 16, 32, 64, 128])
    }

    /// 64x64 input, maps 4/8/16/32/64.
    pub fn desk() -> Self {
        Self::five_layers(64, [4, 8, 16, 32, 64])
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => Self::paper(),
            Profile::Desk => Self::desk(),
        }
    }

    /// Two-layer network for gradient checks.
    pub fn toy(input_size: usize) -> Self {
        Self {
            input_size,
            layers: vec![
                LayerSpec {
                    out_channels: 2,
                    kernel: 3,
                    activation: Activation::Tanh,
                    abs: true,
                    pool: HALVING,
                },
                LayerSpec {
                    out_channels: 3,
                    kernel: 1,
                    activation: Activation::Relu,
                    abs: false,
                    pool: Pooling::Global,
                },
            ],
        }
    }

    pub fn feature_len(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.layers.is_empty() {
            return bad("no layers".into());
        }
        if self.input_size == 0 {
            return bad("input size must be positive".into());
        }
        let mut size = self.input_size;
        for (i, l) in self.layers.iter().enumerate() {
            if l.out_channels == 0 || l.kernel % 2 == 0 {
                return bad(format!("layer {}: need positive maps and an odd kernel", i + 1));
            }
            if l.kernel > size {
                return bad(format!("layer {}: kernel {} exceeds map size {size}", i + 1, l.kernel));
            }
            let last = i + 1 == self.layers.len();
            match l.pool {
                Pooling::Global if !last => return bad(format!("layer {}: global pooling before the last layer", i + 1)),
                Pooling::Average { .. } if last => return bad("last layer must pool globally".into()),
                Pooling::Average { window, stride, pad } => {
                    if window == 0 || stride == 0 || pad >= size || size + 2 * pad < window {
                        return bad(format!("layer {}: pooling does not fit a {size}-wide map", i + 1));
                    }
                    size = (size + 2 * pad - window) / stride + 1;
                }
                Pooling::Global => {}
            }
        }
        Ok(())
    }

    /// Spatial side length entering each layer.
    pub fn input_sizes(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut size = self.input_size;
        for l in &self.layers {
            out.push(size);
            if let Pooling::Average { window, stride, pad } = l.pool {
                size = (size + 2 * pad - window) / stride + 1;
            }
        }
        out
    }

    fn in_channels(&self, layer: usize) -> usize {
        if layer == 0 {
            1
        } else {
            self.layers[layer - 1].out_channels
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `[cout][cin][k][k]`
    pub kernel: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Trainable parameters. Convolutions carry no bias: batch normalization
/// subtracts the channel mean right after them, so a bias would receive a
/// zero gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub layers: Vec<LayerParams>,
    /// `[2][features]`
    pub fc_weight: Vec<f64>,
    pub fc_bias: Vec<f64>,
}

impl Params {
    pub fn zeros_like(other: &Params) -> Params {
        let z = |v: &Vec<f64>| vec![0.0; v.len()];
        Params {
            layers: other
                .layers
                .iter()
                .map(|l| LayerParams {
                    kernel: z(&l.kernel),
                    gamma: z(&l.gamma),
                    beta: z(&l.beta),
                })
                .collect(),
            fc_weight: z(&other.fc_weight),
            fc_bias: z(&other.fc_bias),
        }
    }

    /// Parameter blocks in checkpoint order.
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.extend([l.kernel.as_slice(), &l.gamma, &l.beta]);
        }
        out.extend([self.fc_weight.as_slice(), &self.fc_bias]);
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.kernel);
            out.push(&mut l.gamma);
            out.push(&mut l.beta);
        }
        out.push(&mut self.fc_weight);
        out.push(&mut self.fc_bias);
        out
    }

    pub fn len(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    pub config: CnnConfig,
    pub params: Params,
    pub running_mean: Vec<Vec<f64>>,
    pub running_var: Vec<Vec<f64>>,
    pub epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Kernels and softmax weights are drawn from `N(0, 1/fan_in)`.
pub fn init_network(config: &CnnConfig, seed: u64) -> Result<CnnModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize, fan_in: usize| -> Vec<f64> {
        let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
        (0..n).map(|_| normal.sample(&mut rng)).collect()
    };
    let mut layers = Vec::new();
    for (i, l) in config.layers.iter().enumerate() {
        let cin = config.in_channels(i);
        let fan_in = cin * l.kernel * l.kernel;
        layers.push(LayerParams {
            kernel: draw(l.out_channels * fan_in, fan_in),
            gamma: vec![1.0; l.out_channels],
            beta: vec![0.0; l.out_channels],
        });
    }
    let f = config.feature_len();
    let params = Params {
        layers,
        fc_weight: draw(2 * f, f),
        fc_bias: vec![0.0; 2],
    };
    Ok(CnnModel {
        running_mean: config.layers.iter().map(|l| vec![0.0; l.out_channels]).collect(),
        running_var: config.layers.iter().map(|l| vec![1.0; l.out_channels]).collect(),
        config: config.clone(),
        params,
        epoch: 0,
    })
}

struct LayerCache {
    input: Vec<Vec<f64>>,
    /// Pre-ABS convolution output, kept only when ABS is applied.
    pre_abs: Option<Vec<Vec<f64>>>,
    xhat: Vec<Vec<f64>>,
    activated: Vec<Vec<f64>>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

/// Cached activations from a training-mode forward pass.
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    features: Vec<Vec<f64>>,
    probs: Vec<[f64; 2]>,
}

impl ForwardCache {
    pub fn probs(&self) -> &[[f64; 2]] {
        &self.probs
    }

    /// Batch `(mean, variance)` of every BN layer.
    pub fn batch_stats(&self) -> Vec<(&[f64], &[f64])> {
        self.layers
            .iter()
            .map(|l| (l.batch_mean.as_slice(), l.batch_var.as_slice()))
            .collect()
    }
}

fn softmax(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

fn log_softmax(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    [logits[0] - lse, logits[1] - lse]
}

impl CnnModel {
    fn pool_tables(&self, layer: usize, size: usize) -> Option<PoolTable> {
        match self.config.layers[layer].pool {
            Pooling::Average { window, stride, pad } => Some(PoolTable::new(size, window, stride, pad)),
            Pooling::Global => None,
        }
    }

    fn check_inputs(&self, inputs: &[&RealMatrix]) -> Result<()> {
        let n = self.config.input_size;
        if inputs.is_empty() {
            return Err(Error::SizeMismatch("empty batch".into()));
        }
        for x in inputs {
            if x.width() != n || x.height() != n {
                return Err(Error::SizeMismatch(format!(
                    "network expects {n}x{n}, got {}x{}",
                    x.width(),
                    x.height()
                )));
            }
        }
        Ok(())
    }

    fn logits(&self, f: &[f64]) -> [f64; 2] {
        let nf = f.len();
        let w = &self.params.fc_weight;
        let dot = |k: usize| w[k * nf..(k + 1) * nf].iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
        [dot(0) + self.params.fc_bias[0], dot(1) + self.params.fc_bias[1]]
    }

    fn run(&self, inputs: &[&RealMatrix], mode: Mode) -> Result<ForwardCache> {
        self.check_inputs(inputs)?;
        let sizes = self.config.input_sizes();
        let mut act: Vec<Vec<f64>> = inputs.iter().map(|x| x.values().to_vec()).collect();
        let mut caches = Vec::with_capacity(self.config.layers.len());
        for (l, spec) in self.config.layers.iter().enumerate() {
            let (size, cin, cout, ks) = (sizes[l], self.config.in_channels(l), spec.out_channels, spec.kernel);
            let hw = size * size;
            let kernel = &self.params.layers[l].kernel;
            let z: Vec<Vec<f64>> = act
                .par_iter()
                .map(|x| ops::conv_forward(x, cin, size, size, kernel, cout, ks))
                .collect();
            let (pre_abs, a) = if spec.abs {
                let a = z.iter().map(|v| v.iter().map(|x| x.abs()).collect()).collect();
                (Some(z), a)
            } else {
                (None, z)
            };
            let (mean, var) = match mode {
                Mode::Train => ops::channel_mean_var(&a, cout, hw),
                Mode::Infer => (self.running_mean[l].clone(), self.running_var[l].clone()),
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
            let (gamma, beta) = (&self.params.layers[l].gamma, &self.params.layers[l].beta);
            let xhat: Vec<Vec<f64>> = a
                .par_iter()
                .map(|x| {
                    let mut out = x.clone();
                    for ch in 0..cout {
                        let (m, s) = (mean[ch], inv_std[ch]);
                        out[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v = (*v - m) * s);
                    }
                    out
                })
                .collect();
            let activated: Vec<Vec<f64>> = xhat
                .par_iter()
                .map(|x| {
                    let mut out = x.clone();
                    for ch in 0..cout {
                        let (g, b) = (gamma[ch], beta[ch]);
                        for v in &mut out[ch * hw..(ch + 1) * hw] {
                            let y = g * *v + b;
                            *v = match spec.activation {
                                Activation::Tanh => y.tanh(),
                                Activation::Relu => y.max(0.0),
                            };
                        }
                    }
                    out
                })
                .collect();
            let pooled: Vec<Vec<f64>> = match self.pool_tables(l, size) {
                Some(table) => activated
                    .par_iter()
                    .map(|t| ops::avg_pool_forward(t, cout, size, size, &table, &table))
                    .collect(),
                None => activated.par_iter().map(|t| ops::global_pool_forward(t, cout, hw)).collect(),
            };
            let input = std::mem::replace(&mut act, pooled);
            if mode == Mode::Train {
                caches.push(LayerCache {
                    input,
                    pre_abs,
                    xhat,
                    activated,
                    inv_std,
                    batch_mean: mean,
                    batch_var: var,
                });
            }
        }
        let probs = act.iter().map(|f| softmax(self.logits(f))).collect();
        Ok(ForwardCache {
            layers: caches,
            features: act,
            probs,
        })
    }

    /// Per-image `[P(cover), P(stego)]`.
    pub fn forward(&self, inputs: &[&RealMatrix], mode: Mode) -> Result<Vec<[f64; 2]>> {
        Ok(self.run(inputs, mode)?.probs)
    }

    pub fn forward_train(&self, inputs: &[&RealMatrix]) -> Result<ForwardCache> {
        self.run(inputs, Mode::Train)
    }

    /// Mean cross-entropy of a training-mode pass.
    pub fn loss(&self, inputs: &[&RealMatrix], labels: &[u8]) -> Result<f64> {
        let cache = self.run(inputs, Mode::Train)?;
        Ok(self.cross_entropy(&cache, labels))
    }

    fn cross_entropy(&self, cache: &ForwardCache, labels: &[u8]) -> f64 {
        let n = labels.len() as f64;
        cache
            .features
            .iter()
            .zip(labels)
            .map(|(f, &y)| -log_softmax(self.logits(f))[y as usize])
            .sum::<f64>()
            / n
    }

    /// Gradient of the mean cross-entropy with respect to every parameter.
    pub fn gradient(&self, cache: &ForwardCache, labels: &[u8]) -> Result<(f64, Params)> {
        let n = labels.len();
        if n != cache.probs.len() {
            return Err(Error::SizeMismatch(format!("{} labels for {} images", n, cache.probs.len())));
        }
        let loss = self.cross_entropy(cache, labels);
        let mut grad = Params::zeros_like(&self.params);
        let nf = self.config.feature_len();

        let dlogits: Vec<[f64; 2]> = cache
            .probs
            .iter()
            .zip(labels)
            .map(|(p, &y)| {
                let mut d = *p;
                d[y as usize] -= 1.0;
                [d[0] / n as f64, d[1] / n as f64]
            })
            .collect();
        for (d, f) in dlogits.iter().zip(&cache.features) {
            for k in 0..2 {
                grad.fc_bias[k] += d[k];
                for (g, v) in grad.fc_weight[k * nf..(k + 1) * nf].iter_mut().zip(f) {
                    *g += d[k] * v;
                }
            }
        }
        let w = &self.params.fc_weight;
        let mut upstream: Vec<Vec<f64>> = dlogits
            .iter()
            .map(|d| (0..nf).map(|j| d[0] * w[j] + d[1] * w[nf + j]).collect())
            .collect();

        let sizes = self.config.input_sizes();
        for l in (0..self.config.layers.len()).rev() {
            let spec = self.config.layers[l];
            let c = &cache.layers[l];
            let (size, cin, cout, ks) = (sizes[l], self.config.in_channels(l), spec.out_channels, spec.kernel);
            let hw = size * size;
            let gamma = &self.params.layers[l].gamma;

            let dt: Vec<Vec<f64>> = match self.pool_tables(l, size) {
                Some(table) => upstream
                    .par_iter()
                    .map(|g| ops::avg_pool_backward(g, cout, size, size, &table, &table))
                    .collect(),
                None => upstream.par_iter().map(|g| ops::global_pool_backward(g, cout, hw)).collect(),
            };
            // through the activation, giving dL/dy
            let dy: Vec<Vec<f64>> = dt
                .par_iter()
                .zip(&c.activated)
                .map(|(g, t)| {
                    g.iter()
                        .zip(t)
                        .map(|(g, t)| match spec.activation {
                            Activation::Tanh => g * (1.0 - t * t),
                            Activation::Relu => {
                                if *t > 0.0 {
                                    *g
                                } else {
                                    0.0
                                }
                            }
                        })
                        .collect()
                })
                .collect();
            let lp = &mut grad.layers[l];
            for (g, xh) in dy.iter().zip(&c.xhat) {
                for ch in 0..cout {
                    let r = ch * hw..(ch + 1) * hw;
                    lp.beta[ch] += g[r.clone()].iter().sum::<f64>();
                    lp.gamma[ch] += g[r.clone()].iter().zip(&xh[r]).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            let m = (n * hw) as f64;
            let (dbeta, dgamma) = (lp.beta.clone(), lp.gamma.clone());
            let da: Vec<Vec<f64>> = dy
                .par_iter()
                .zip(&c.xhat)
                .map(|(g, xh)| {
                    let mut out = vec![0.0; cout * hw];
                    for ch in 0..cout {
                        let (gm, s) = (gamma[ch], c.inv_std[ch]);
                        let (sum_dxh, sum_dxh_xh) = (gm * dbeta[ch], gm * dgamma[ch]);
                        for i in ch * hw..(ch + 1) * hw {
                            out[i] = s / m * (m * gm * g[i] - sum_dxh - xh[i] * sum_dxh_xh);
                        }
                    }
                    out
                })
                .collect();
            let dz: Vec<Vec<f64>> = match &c.pre_abs {
                Some(z) => da
                    .iter()
                    .zip(z)
                    .map(|(g, z)| g.iter().zip(z).map(|(g, z)| g * z.signum() * f64::from(*z != 0.0)).collect())
                    .collect(),
                None => da,
            };
            let per_sample: Vec<Vec<f64>> = c
                .input
                .par_iter()
                .zip(&dz)
                .map(|(x, g)| {
                    let mut dk = vec![0.0; cout * cin * ks * ks];
                    ops::conv_backward_kernel(x, g, cin, size, size, cout, ks, &mut dk);
                    dk
                })
                .collect();
            for dk in &per_sample {
                for (a, b) in grad.layers[l].kernel.iter_mut().zip(dk) {
                    *a += b;
                }
            }
            if l > 0 {
                let kernel = &self.params.layers[l].kernel;
                upstream = dz
                    .par_iter()
                    .map(|g| ops::conv_backward_input(g, kernel, cin, size, size, cout, ks))
                    .collect();
            }
        }
        Ok((loss, grad))
    }

    /// Folds the batch statistics of a training pass into the running ones.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        for (l, c) in cache.layers.iter().enumerate() {
            for ch in 0..c.batch_mean.len() {
                self.running_mean[l][ch] = BN_MOMENTUM * self.running_mean[l][ch] + (1.0 - BN_MOMENTUM) * c.batch_mean[ch];
                self.running_var[l][ch] = BN_MOMENTUM * self.running_var[l][ch] + (1.0 - BN_MOMENTUM) * c.batch_var[ch];
            }
        }
    }

    /// Argmax answer, ties going to stego.
    pub fn predict(&self, inputs: &[&RealMatrix]) -> Result<Vec<u8>> {
        Ok(self
            .forward(inputs, Mode::Infer)?
            .iter()
            .map(|p| u8::from(p[1] >= p[0]))
            .collect())
    }
}

/// Momentum SGD state: `v = mu v + g`, `theta -= lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Momentum {
    pub velocity: Params,
}

impl Momentum {
    pub fn new(params: &Params) -> Self {
        Self {
            velocity: Params::zeros_like(params),
        }
    }

    pub fn step(&mut self, params: &mut Params, grad: &Params, learning_rate: f64, momentum: f64) {
        for ((p, v), g) in params
            .blocks_mut()
            .into_iter()
            .zip(self.velocity.blocks_mut())
            .zip(grad.blocks())
        {
            for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = momentum * *v + g;
                *p -= learning_rate * *v;
            }
        }
    }
}

/// One optimization step on a batch: training-mode forward, backprop,
/// momentum update and running-statistics update. Returns the batch loss
/// and the training-mode predictions.
pub fn backward_and_step(
    model: &mut CnnModel,
    optimizer: &mut Momentum,
    inputs: &[&RealMatrix],
    labels: &[u8],
    learning_rate: f64,
    momentum: f64,
) -> Result<(f64, Vec<[f64; 2]>)> {
    let cache = model.forward_train(inputs)?;
    let (loss, grad) = model.gradient(&cache, labels)?;
    if !loss.is_finite() {
        return Err(Error::TrainingDiverged {
            epoch: model.epoch,
            loss,
        });
    }
    optimizer.step(&mut model.params, &grad, learning_rate, momentum);
    model.update_running_stats(&cache);
    Ok((loss, cache.probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::Padding;
    use rand::Rng;

    fn random_inputs(seed: u64, n: usize, size: usize) -> Vec<RealMatrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| RealMatrix::from_fn(size, size, |_, _| rng.random_range(-2.0..2.0)))
            .collect()
    }

    #[test]
    fn configs() {
        let paper = CnnConfig::paper();
        paper.validate().unwrap();
        assert_eq!(paper.feature_len(), 128);
        assert_eq!(paper.input_sizes(), vec![512, 256, 128, 64, 32]);
        assert_eq!(CnnConfig::desk().input_sizes(), vec![64, 32, 16, 8, 4]);
        let mut broken = CnnConfig::desk();
        broken.layers[1].kernel = 4;
        assert!(matches!(broken.validate(), Err(Error::InvalidConfig(_))));
        let mut broken = CnnConfig::desk();
        broken.layers[4].pool = HALVING;
        assert!(broken.validate().is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_network(&CnnConfig::desk(), 5).unwrap();
        assert_eq!(a, init_network(&CnnConfig::desk(), 5).unwrap());
        assert_ne!(a, init_network(&CnnConfig::desk(), 6).unwrap());
        assert_eq!(a.params.fc_weight.len(), 2 * 64);
    }

    #[test]
    fn softmax_outputs_sum_to_one() {
        let model = init_network(&CnnConfig::desk(), 1).unwrap();
        let inputs = random_inputs(2, 3, 64);
        let refs: Vec<&RealMatrix> = inputs.iter().collect();
        for mode in [Mode::Train, Mode::Infer] {
            for p in model.forward(&refs, mode).unwrap() {
                assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
            }
        }
        let wrong = RealMatrix::zeros(32, 32);
        assert!(matches!(model.forward(&[&wrong], Mode::Infer), Err(Error::SizeMismatch(_))));
    }

    #[test]
    fn zero_input_with_zero_softmax_is_even() {
        let mut model = init_network(&CnnConfig::desk(), 1).unwrap();
        model.params.fc_weight.iter_mut().for_each(|w| *w = 0.0);
        let p = model.forward(&[&RealMatrix::zeros(64, 64)], Mode::Infer).unwrap();
        assert_eq!(p[0], [0.5, 0.5]);
    }

    #[test]
    fn bn_train_output_is_standardized() {
        let model = init_network(&CnnConfig::toy(16), 3).unwrap();
        let inputs = random_inputs(4, 5, 16);
        let refs: Vec<&RealMatrix> = inputs.iter().collect();
        let cache = model.forward_train(&refs).unwrap();
        for layer in &cache.layers {
            let cout = layer.inv_std.len();
            let hw = layer.xhat[0].len() / cout;
            let (m, v) = ops::channel_mean_var(&layer.xhat, cout, hw);
            for ch in 0..cout {
                assert!(m[ch].abs() < 1e-6);
                // epsilon shrinks the variance slightly below 1
                let var_in = layer.batch_var[ch];
                assert!((v[ch] - var_in / (var_in + BN_EPSILON)).abs() < 1e-9);
                if var_in > 1.0 {
                    assert!((v[ch] - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn bn_train_equals_infer_on_standard_batch() {
        // one 1x1 layer with identity kernel: the convolution output is the input
        let config = CnnConfig {
            input_size: 4,
            layers: vec![LayerSpec {
                out_channels: 1,
                kernel: 1,
                activation: Activation::Tanh,
                abs: false,
                pool: Pooling::Global,
            }],
        };
        let mut model = init_network(&config, 0).unwrap();
        model.params.layers[0].kernel = vec![1.0];
        let vals = [-1.0, 1.0];
        let inputs: Vec<RealMatrix> = (0..2)
            .map(|k| RealMatrix::from_fn(4, 4, |r, c| vals[(r + c + k) % 2]))
            .collect();
        let refs: Vec<&RealMatrix> = inputs.iter().collect();
        let train = model.forward(&refs, Mode::Train).unwrap();
        let infer = model.forward(&refs, Mode::Infer).unwrap();
        for (a, b) in train.iter().zip(&infer) {
            // only epsilon separates the two
            assert!((a[0] - b[0]).abs() < 1e-5);
        }
    }

    /// Direct-loop forward written independently of the fast path.
    fn naive_forward(model: &CnnModel, x: &RealMatrix) -> [f64; 2] {
        let cfg = &model.config;
        let mut maps: Vec<Vec<Vec<f64>>> = vec![(0..x.height()).map(|r| x.row(r).to_vec()).collect()];
        for (l, spec) in cfg.layers.iter().enumerate() {
            let n = maps[0].len();
            let cin = maps.len();
            let p = spec.kernel as isize / 2;
            let mut next = Vec::new();
            for co in 0..spec.out_channels {
                let mut out = vec![vec![0.0; n]; n];
                for (r, row) in out.iter_mut().enumerate() {
                    for (c, cell) in row.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for (ci, plane) in maps.iter().enumerate() {
                            for ky in 0..spec.kernel {
                                for kx in 0..spec.kernel {
                                    let (yy, xx) = (r as isize + ky as isize - p, c as isize + kx as isize - p);
                                    if yy >= 0 && xx >= 0 && (yy as usize) < n && (xx as usize) < n {
                                        let k = model.params.layers[l].kernel
                                            [((co * cin + ci) * spec.kernel + ky) * spec.kernel + kx];
                                        acc += k * plane[yy as usize][xx as usize];
                                    }
                                }
                            }
                        }
                        if spec.abs {
                            acc = acc.abs();
                        }
                        let y = model.params.layers[l].gamma[co] * (acc - model.running_mean[l][co])
                            / (model.running_var[l][co] + BN_EPSILON).sqrt()
                            + model.params.layers[l].beta[co];
                        *cell = match spec.activation {
                            Activation::Tanh => y.tanh(),
                            Activation::Relu => y.max(0.0),
                        };
                    }
                }
                next.push(out);
            }
            maps = match spec.pool {
                Pooling::Global => next
                    .iter()
                    .map(|m| vec![vec![m.iter().flatten().sum::<f64>() / (n * n) as f64]])
                    .collect(),
                Pooling::Average { window, stride, pad } => {
                    let out_n = (n + 2 * pad - window) / stride + 1;
                    next.iter()
                        .map(|m| {
                            (0..out_n)
                                .map(|oy| {
                                    (0..out_n)
                                        .map(|ox| {
                                            let mut s = 0.0;
                                            for dy in 0..window {
                                                for dx in 0..window {
                                                    let yy = (oy * stride + dy) as isize - pad as isize;
                                                    let xx = (ox * stride + dx) as isize - pad as isize;
                                                    s += m[Padding::Reflect101.fold(yy, n)][Padding::Reflect101.fold(xx, n)];
                                                }
                                            }
                                            s / (window * window) as f64
                                        })
                                        .collect()
                                })
                                .collect()
                        })
                        .collect()
                }
            };
        }
        let f: Vec<f64> = maps.iter().map(|m| m[0][0]).collect();
        let nf = f.len();
        let mut logit = [0.0; 2];
        for (k, lg) in logit.iter_mut().enumerate() {
            *lg = model.params.fc_bias[k] + (0..nf).map(|j| model.params.fc_weight[k * nf + j] * f[j]).sum::<f64>();
        }
        let z = logit[0].exp() + logit[1].exp();
        [logit[0].exp() / z, logit[1].exp() / z]
    }

    fn toy32() -> CnnConfig {
        let mut cfg = CnnConfig::five_layers(32, [3, 4, 5, 4, 6]);
        cfg.layers[1].kernel = 3;
        cfg
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let mut model = init_network(&toy32(), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for l in 0..model.config.layers.len() {
            for ch in 0..model.running_mean[l].len() {
                model.running_mean[l][ch] = rng.random_range(-0.5..0.5);
                model.running_var[l][ch] = rng.random_range(0.2..3.0);
                model.params.layers[l].gamma[ch] = rng.random_range(0.5..1.5);
                model.params.layers[l].beta[ch] = rng.random_range(-0.3..0.3);
            }
        }
        model.params.fc_bias = vec![0.1, -0.2];
        for x in random_inputs(11, 3, 32) {
            let fast = model.forward(&[&x], Mode::Infer).unwrap()[0];
            let slow = naive_forward(&model, &x);
            assert!((fast[0] - slow[0]).abs() < 1e-10, "{fast:?} {slow:?}");
        }
    }

    pub(crate) fn max_gradient_error(model: &CnnModel, inputs: &[RealMatrix], labels: &[u8]) -> Vec<(String, f64)> {
        let refs: Vec<&RealMatrix> = inputs.iter().collect();
        let cache = model.forward_train(&refs).unwrap();
        let (_, grad) = model.gradient(&cache, labels).unwrap();
        let names: Vec<String> = {
            let mut v = Vec::new();
            for l in 0..model.config.layers.len() {
                v.extend([format!("kernel{l}"), format!("gamma{l}"), format!("beta{l}")]);
            }
            v.extend(["fc_weight".to_string(), "fc_bias".to_string()]);
            v
        };
        let h = 1e-5;
        let mut out = Vec::new();
        let analytic = grad.blocks().iter().map(|b| b.to_vec()).collect::<Vec<_>>();
        for (bi, name) in names.into_iter().enumerate() {
            let mut worst: f64 = 0.0;
            for i in 0..analytic[bi].len() {
                let mut plus = model.clone();
                plus.params.blocks_mut()[bi][i] += h;
                let mut minus = model.clone();
                minus.params.blocks_mut()[bi][i] -= h;
                let numeric = (plus.loss(&refs, labels).unwrap() - minus.loss(&refs, labels).unwrap()) / (2.0 * h);
                let a = analytic[bi][i];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(err);
            }
            out.push((name, worst));
        }
        out
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut model = init_network(&CnnConfig::toy(16), 12).unwrap();
        model.params.layers[1].beta = vec![0.3, 0.2, 0.4];
        let inputs = random_inputs(13, 4, 16);
        for (name, err) in max_gradient_error(&model, &inputs, &[0, 1, 1, 0]) {
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn abs_gradient_flips_sign() {
        // a single pixel through a 1x1 kernel of -1: pre-activation is negative
        let config = CnnConfig {
            input_size: 3,
            layers: vec![LayerSpec {
                out_channels: 1,
                kernel: 1,
                activation: Activation::Tanh,
                abs: true,
                pool: Pooling::Global,
            }],
        };
        let mut model = init_network(&config, 0).unwrap();
        model.params.layers[0].kernel = vec![-1.0];
        let xs = [RealMatrix::from_fn(3, 3, |r, c| (r * 3 + c) as f64 + 1.0), RealMatrix::filled(3, 3, 0.5)];
        let refs: Vec<&RealMatrix> = xs.iter().collect();
        let cache = model.forward_train(&refs).unwrap();
        let (_, g_neg) = model.gradient(&cache, &[1, 0]).unwrap();
        model.params.layers[0].kernel = vec![1.0];
        let cache = model.forward_train(&refs).unwrap();
        let (_, g_pos) = model.gradient(&cache, &[1, 0]).unwrap();
        // |(-1)x| == |x|, so the kernel gradient flips with the kernel sign
        assert!((g_neg.layers[0].kernel[0] + g_pos.layers[0].kernel[0]).abs() < 1e-14);
        assert!(g_pos.layers[0].kernel[0].abs() > 0.0);
    }

    #[test]
    fn overfits_one_batch() {
        let config = CnnConfig::toy(16);
        let mut model = init_network(&config, 14).unwrap();
        let mut opt = Momentum::new(&model.params);
        let inputs = random_inputs(15, 8, 16);
        let refs: Vec<&RealMatrix> = inputs.iter().collect();
        let labels = [0, 1, 0, 1, 1, 0, 0, 1];
        let mut losses = Vec::new();
        for _ in 0..200 {
            let (loss, _) = backward_and_step(&mut model, &mut opt, &refs, &labels, 0.3, 0.7).unwrap();
            losses.push(loss);
        }
        assert!(losses.windows(2).all(|w| w[1] < w[0]));
        assert!(losses[199] < 0.01, "final loss {}", losses[199]);
    }

    #[test]
    fn inference_is_deterministic_across_pools() {
        let model = init_network(&CnnConfig::desk(), 2).unwrap();
        let inputs = random_inputs(3, 4, 64);
        let refs: Vec<&RealMatrix> = inputs.iter().collect();
        let a = model.forward(&refs, Mode::Infer).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| model.forward(&refs, Mode::Infer).unwrap());
        assert_eq!(a, b);
        let c = model.forward(&refs[..1], Mode::Infer).unwrap();
        assert_eq!(a[0], c[0]);
    }
}
