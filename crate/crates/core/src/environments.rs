//! Entropy-driven environment construction.
//!
//! Each training batch is split by per-sample policy entropy into a
//! low-uncertainty dominant environment and three adversarial bands
//! expressed as fractions of the batch maximum `H_max`:
//!
//! | environment | entropy band            |
//! |-------------|-------------------------|
//! | adv1        | `[0.75, 1.0] · H_max`   |
//! | adv2        | `[0.50, 0.75) · H_max`  |
//! | adv3        | `[0.25, 0.50) · H_max`  |
//! | dominant    | argmin, plus everything below `0.25 · H_max` |
//!
//! Samples are then appended to bounded FIFO queues, one per environment.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::detector::DetectorParams;
use crate::error::{CrdaError, Result};
use crate::nn::l2_normalize;
use crate::policy::{entropy_of, PolicyParams};
use crate::synthtask::SyntheticSample;

pub const NUM_ENVIRONMENTS: usize = 4;
pub const ENV_NAMES: [&str; NUM_ENVIRONMENTS] = ["dominant", "adv1", "adv2", "adv3"];

/// Band lower bounds as fractions of `H_max`, for adv1..adv3.
const BAND_LOWER: [f64; 3] = [0.75, 0.50, 0.25];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvPartition {
    pub dominant: Vec<usize>,
    pub adv1: Vec<usize>,
    pub adv2: Vec<usize>,
    pub adv3: Vec<usize>,
    pub per_sample_entropy: Vec<f64>,
}

impl EnvPartition {
    /// Index sets in queue order: dominant, adv1, adv2, adv3.
    pub fn sets(&self) -> [&[usize]; NUM_ENVIRONMENTS] {
        [&self.dominant, &self.adv1, &self.adv2, &self.adv3]
    }
}

pub fn partition_batch(entropies: &[f64]) -> Result<EnvPartition> {
    if entropies.is_empty() {
        return Err(CrdaError::Empty("partition_batch entropies"));
    }
    if let Some(h) = entropies.iter().find(|h| !h.is_finite() || **h < 0.0) {
        return Err(CrdaError::Invalid(format!(
            "entropy {h} must be finite and non-negative"
        )));
    }
    // Lowest index wins ties for the argmin.
    let argmin = entropies
        .iter()
        .enumerate()
        .fold(0, |best, (i, h)| if *h < entropies[best] { i } else { best });
    let h_max = entropies.iter().copied().fold(0.0, f64::max);

    let mut p = EnvPartition {
        dominant: Vec::new(),
        adv1: Vec::new(),
        adv2: Vec::new(),
        adv3: Vec::new(),
        per_sample_entropy: entropies.to_vec(),
    };
    for (i, &h) in entropies.iter().enumerate() {
        if i == argmin || h_max == 0.0 {
            p.dominant.push(i);
        } else if h >= BAND_LOWER[0] * h_max {
            p.adv1.push(i);
        } else if h >= BAND_LOWER[1] * h_max {
            p.adv2.push(i);
        } else if h >= BAND_LOWER[2] * h_max {
            p.adv3.push(i);
        } else {
            p.dominant.push(i);
        }
    }
    Ok(p)
}

/// Bounded FIFO: pushing beyond capacity evicts the oldest entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvQueue<T> {
    buffer: VecDeque<T>,
    capacity: usize,
}

impl<T> EnvQueue<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(CrdaError::out_of_range("queue capacity", "must be >= 1"));
        }
        Ok(Self {
            buffer: VecDeque::with_capacity(capacity + 1),
            capacity,
        })
    }

    pub fn push(&mut self, item: T) {
        self.buffer.push_back(item);
        while self.buffer.len() > self.capacity {
            self.buffer.pop_front();
        }
    }

    pub fn extend(&mut self, items: impl IntoIterator<Item = T>) {
        for item in items {
            self.push(item);
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.buffer.iter()
    }

    /// Contiguous view, oldest first.
    pub fn as_slice(&mut self) -> &[T] {
        self.buffer.make_contiguous()
    }
}

pub type SampleQueues = [EnvQueue<SyntheticSample>; NUM_ENVIRONMENTS];

pub fn new_queues(capacity: usize) -> Result<SampleQueues> {
    Ok([
        EnvQueue::new(capacity)?,
        EnvQueue::new(capacity)?,
        EnvQueue::new(capacity)?,
        EnvQueue::new(capacity)?,
    ])
}

/// Appends each environment's samples in batch order.
pub fn push_environments<T: Clone>(
    queues: &mut [EnvQueue<T>; NUM_ENVIRONMENTS],
    partition: &EnvPartition,
    samples: &[T],
) -> Result<()> {
    if partition.per_sample_entropy.len() != samples.len() {
        return Err(CrdaError::ShapeMismatch {
            context: "push_environments samples",
            expected: partition.per_sample_entropy.len(),
            actual: samples.len(),
        });
    }
    for (queue, set) in queues.iter_mut().zip(partition.sets()) {
        queue.extend(set.iter().map(|&i| samples[i].clone()));
    }
    Ok(())
}

/// Softmax of `−H̄_m` over the environments that have a mean entropy;
/// `None` entries (empty queues) receive weight 0.
pub fn weights_from_mean_entropies(mean_entropies: &[Option<f64>]) -> Result<Vec<f64>> {
    let present: Vec<f64> = mean_entropies.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(CrdaError::Empty("environment queues"));
    }
    let shift = present.iter().copied().fold(f64::INFINITY, f64::min);
    let exps: Vec<f64> = mean_entropies
        .iter()
        .map(|h| h.map_or(0.0, |h| (-(h - shift)).exp()))
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Policy entropy evaluated on a sample's normalized detector latent.
pub fn sample_entropy(policy: &PolicyParams, detector: &DetectorParams, sample: &SyntheticSample) -> Result<f64> {
    let latent = detector.forward_latent(&sample.features)?;
    let fwd = policy.forward_cached(&l2_normalize(&latent))?;
    Ok(entropy_of(fwd.dist.probs()))
}

/// Mean per-sample entropy of each queue under the current policy and
/// detector, followed by the softmax weights. Returns `(weights, means)`.
pub fn environment_weights(
    queues: &SampleQueues,
    policy: &PolicyParams,
    detector: &DetectorParams,
) -> Result<(Vec<f64>, Vec<Option<f64>>)> {
    let means = queues
        .iter()
        .map(|q| {
            if q.is_empty() {
                return Ok(None);
            }
            let total: f64 = q
                .iter()
                .map(|s| sample_entropy(policy, detector, s))
                .sum::<Result<f64>>()?;
            Ok(Some(total / q.len() as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((weights_from_mean_entropies(&means)?, means))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_partition_example() {
        let p = partition_batch(&[0.1, 1.9, 1.0, 0.6]).unwrap();
        assert_eq!(p.dominant, vec![0]);
        assert_eq!(p.adv1, vec![1]);
        assert_eq!(p.adv2, vec![2]);
        assert_eq!(p.adv3, vec![3]);
    }

    #[test]
    fn equal_entropies_go_to_top_band() {
        let p = partition_batch(&[0.7; 5]).unwrap();
        assert_eq!(p.dominant, vec![0]);
        assert_eq!(p.adv1, vec![1, 2, 3, 4]);
    }

    #[test]
    fn singleton_and_all_zero_batches() {
        let p = partition_batch(&[1.2]).unwrap();
        assert_eq!(p.dominant, vec![0]);
        assert!(p.adv1.is_empty() && p.adv2.is_empty() && p.adv3.is_empty());
        let z = partition_batch(&[0.0; 3]).unwrap();
        assert_eq!(z.dominant, vec![0, 1, 2]);
        assert!(partition_batch(&[]).is_err());
        assert!(partition_batch(&[0.1, -0.2]).is_err());
    }

    #[test]
    fn below_band_samples_join_dominant() {
        let p = partition_batch(&[1.0, 0.05, 0.2, 0.3]).unwrap();
        assert_eq!(p.dominant, vec![1, 2]);
        assert_eq!(p.adv1, vec![0]);
        assert_eq!(p.adv3, vec![3]);
    }

    #[test]
    fn fifo_eviction() {
        let mut q = EnvQueue::new(2).unwrap();
        q.extend(["a", "b", "c"]);
        assert_eq!(q.iter().copied().collect::<Vec<_>>(), vec!["b", "c"]);
        let mut q = EnvQueue::new(5).unwrap();
        q.extend([1, 2, 3]);
        assert_eq!(q.as_slice(), &[1, 2, 3]);
        assert!(EnvQueue::<u8>::new(0).is_err());
    }

    #[test]
    fn weights_closed_forms() {
        let w = weights_from_mean_entropies(&[Some(1.0); 4]).unwrap();
        assert!(w.iter().all(|x| (x - 0.25).abs() < 1e-15));
        let l7 = 7f64.ln();
        let w = weights_from_mean_entropies(&[Some(0.0), Some(l7), Some(l7), Some(l7)]).unwrap();
        for (a, b) in w.iter().zip([0.7, 0.1, 0.1, 0.1]) {
            assert!((a - b).abs() < 1e-9);
        }
        let w = weights_from_mean_entropies(&[None, Some(3.0), None, None]).unwrap();
        assert_eq!(w, vec![0.0, 1.0, 0.0, 0.0]);
        assert!(weights_from_mean_entropies(&[None; 4]).is_err());
    }
}
