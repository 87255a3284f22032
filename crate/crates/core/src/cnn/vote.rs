//! Snapshot voting for one CNN and test-membership aggregation across CNNs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Mode, SnapshotRing};
use crate::error::{Error, Result};
use crate::kernels::RealMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VoteRule {
    /// Average the argmax answers of the snapshots.
    #[default]
    Discrete,
    /// Average the stego probabilities instead.
    ProbabilityAverage,
}

/// 0 iff the mean of the binary answers is below one half.
pub fn majority_vote(answers: &[u8]) -> Result<u8> {
    if answers.is_empty() {
        return Err(Error::EmptyRing);
    }
    let ones = answers.iter().filter(|&&a| a != 0).count();
    Ok(u8::from(2 * ones >= answers.len()))
}

/// Per-snapshot answers for a batch of residuals: `out[s][i]`.
pub fn snapshot_answers(inputs: &[&RealMatrix], ring: &SnapshotRing) -> Result<Vec<Vec<u8>>> {
    if ring.is_empty() {
        return Err(Error::EmptyRing);
    }
    ring.snapshots().map(|m| m.predict(inputs)).collect()
}

/// One CNN's decision for each input.
pub fn vote_snapshot(inputs: &[&RealMatrix], ring: &SnapshotRing, rule: VoteRule) -> Result<Vec<u8>> {
    if ring.is_empty() {
        return Err(Error::EmptyRing);
    }
    match rule {
        VoteRule::Discrete => {
            let answers = snapshot_answers(inputs, ring)?;
            (0..inputs.len())
                .map(|i| majority_vote(&answers.iter().map(|a| a[i]).collect::<Vec<_>>()))
                .collect()
        }
        VoteRule::ProbabilityAverage => {
            let mut sums = vec![0.0; inputs.len()];
            for m in ring.snapshots() {
                for (s, p) in sums.iter_mut().zip(m.forward(inputs, Mode::Infer)?) {
                    *s += p[1];
                }
            }
            let l = ring.len() as f64;
            Ok(sums.iter().map(|s| u8::from(s / l >= 0.5)).collect())
        }
    }
}

/// Averages the votes of the CNNs whose test set contained the image.
/// `votes` maps CNN index to that CNN's vote; entries outside `membership`
/// are ignored.
pub fn aggregate_over_cnns(image_id: &str, votes: &BTreeMap<usize, u8>, membership: &BTreeSet<usize>) -> Result<u8> {
    let selected: Vec<u8> = membership.iter().filter_map(|i| votes.get(i).copied()).collect();
    if selected.is_empty() {
        return Err(Error::ImageNeverInTest(image_id.to_string()));
    }
    majority_vote(&selected)
}
