use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{backward_and_step, init_network, CnnConfig, CnnModel, Momentum};
use crate::error::{Error, Result};
use crate::kernels::RealMatrix;

pub const DEFAULT_RING_CAPACITY: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub ring_capacity: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.0,
            max_epochs: 300,
            seed: 0,
            ring_capacity: DEFAULT_RING_CAPACITY,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || !(self.learning_rate > 0.0)
            || !(self.momentum > 0.0)
            || self.max_epochs == 0
            || self.ring_capacity == 0
        {
            return Err(Error::InvalidConfig(
                "batch size, learning rate, momentum, epochs and ring capacity must be positive".into(),
            ));
        }
        if self.weight_decay != 0.0 {
            return Err(Error::InvalidConfig("weight decay is not supported".into()));
        }
        Ok(())
    }
}

/// The most recent end-of-epoch models, oldest evicted first.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotRing {
    capacity: usize,
    snapshots: VecDeque<CnnModel>,
}

impl SnapshotRing {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            snapshots: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, model: CnnModel) {
        if self.snapshots.len() == self.capacity {
            self.snapshots.pop_front();
        }
        self.snapshots.push_back(model);
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn snapshots(&self) -> impl Iterator<Item = &CnnModel> {
        self.snapshots.iter()
    }

    pub fn epochs(&self) -> Vec<usize> {
        self.snapshots.iter().map(|m| m.epoch).collect()
    }

    pub fn latest(&self) -> Option<&CnnModel> {
        self.snapshots.back()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    /// Fraction misclassified by the training-mode forward passes of the epoch.
    pub train_error: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CnnModel,
    pub ring: SnapshotRing,
    pub stats: Vec<EpochStats>,
}

/// Runs exactly `max_epochs` epochs of mini-batch momentum SGD over the
/// samples, reshuffled every epoch. Cover and stego of a pair are treated
/// as independent images. A snapshot is kept after every epoch.
pub fn train(config: &CnnConfig, samples: &[(RealMatrix, u8)], spec: &TrainSpec) -> Result<TrainOutcome> {
    spec.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut model = init_network(config, spec.seed)?;
    let mut optimizer = Momentum::new(&model.params);
    let mut ring = SnapshotRing::new(spec.ring_capacity);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_5471);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut stats = Vec::with_capacity(spec.max_epochs);
    for epoch in 1..=spec.max_epochs {
        model.epoch = epoch;
        order.shuffle(&mut rng);
        let (mut loss_sum, mut wrong) = (0.0, 0usize);
        for chunk in order.chunks(spec.batch_size) {
            let inputs: Vec<&RealMatrix> = chunk.iter().map(|&i| &samples[i].0).collect();
            let labels: Vec<u8> = chunk.iter().map(|&i| samples[i].1).collect();
            let (loss, probs) =
                backward_and_step(&mut model, &mut optimizer, &inputs, &labels, spec.learning_rate, spec.momentum)?;
            loss_sum += loss * chunk.len() as f64;
            wrong += probs
                .iter()
                .zip(&labels)
                .filter(|(p, &y)| u8::from(p[1] >= p[0]) != y)
                .count();
        }
        let loss = loss_sum / samples.len() as f64;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch, loss });
        }
        stats.push(EpochStats {
            epoch,
            loss,
            train_error: wrong as f64 / samples.len() as f64,
        });
        ring.push(model.clone());
    }
    Ok(TrainOutcome { model, ring, stats })
}
