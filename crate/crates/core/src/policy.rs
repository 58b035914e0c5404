//! The augmentation policy: a two-layer relu MLP mapping a detector-latent
//! state to a softmax distribution over the seven augmentation operators.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::detector::DetectorParams;
use crate::error::{CrdaError, Result};
use crate::nn::{l2_normalize, relu_backward_in_place, relu_in_place, softmax, Dense, ParamSet};
use crate::schedules::sample_index;
use crate::synthtask::SyntheticSample;

pub const NUM_ACTIONS: usize = 7;

const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState(pub Vec<f64>);

impl LatentState {
    /// Episode-initial state `s₀ ~ 𝒩_k(0, I)`.
    pub fn standard_normal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self((0..dim).map(|_| StandardNormal.sample(rng)).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub hidden: Dense,
    pub output: Dense,
}

impl ParamSet for PolicyParams {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("policy.w1", &self.hidden.weight),
            ("policy.b1", &self.hidden.bias),
            ("policy.w2", &self.output.weight),
            ("policy.b2", &self.output.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("policy.w1", &mut self.hidden.weight),
            ("policy.b1", &mut self.hidden.bias),
            ("policy.w2", &mut self.output.weight),
            ("policy.b2", &mut self.output.bias),
        ]
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct PolicyForward {
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub dist: ActionDistribution,
}

impl PolicyParams {
    pub fn zeros(state_dim: usize, hidden_dim: usize) -> Self {
        Self {
            hidden: Dense::zeros(state_dim, hidden_dim),
            output: Dense::zeros(hidden_dim, NUM_ACTIONS),
        }
    }

    pub fn init<R: Rng + ?Sized>(state_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        Self {
            hidden: Dense::uniform(state_dim, hidden_dim, rng),
            output: Dense::uniform(hidden_dim, NUM_ACTIONS, rng),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.hidden.inputs
    }

    pub fn forward_cached(&self, state: &[f64]) -> Result<PolicyForward> {
        self.hidden.check_input(state, "policy state")?;
        let mut hidden = self.hidden.forward(state);
        relu_in_place(&mut hidden);
        let logits = self.output.forward(&hidden);
        let dist = ActionDistribution {
            probs: softmax(&logits),
        };
        Ok(PolicyForward { hidden, logits, dist })
    }

    /// Accumulates parameter gradients given `∂L/∂logits` at `state`.
    pub fn backward(&self, state: &[f64], cache: &PolicyForward, grad_logits: &[f64], grads: &mut PolicyParams) {
        let mut grad_hidden = self.output.backward(&cache.hidden, grad_logits, &mut grads.output);
        relu_backward_in_place(&mut grad_hidden, &cache.hidden);
        self.hidden.backward(state, &grad_hidden, &mut grads.hidden);
    }
}

pub fn policy_forward(params: &PolicyParams, state: &LatentState) -> Result<ActionDistribution> {
    Ok(params.forward_cached(state.as_slice())?.dist)
}

/// A probability vector over actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution {
    probs: Vec<f64>,
}

impl ActionDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(CrdaError::Empty("action distribution"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(CrdaError::Invalid(format!(
                "probabilities must be finite and non-negative: {probs:?}"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(CrdaError::Invalid(format!("probabilities sum to {total}, expected 1")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            probs: vec![1.0 / k as f64; k],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Draws an action and returns it with its log-probability.
pub fn sample_action<R: Rng + ?Sized>(dist: &ActionDistribution, rng: &mut R) -> (usize, f64) {
    let a = sample_index(&dist.probs, rng);
    (a, dist.probs[a].ln())
}

/// Shannon entropy in nats, with `0·ln 0 = 0`.
pub fn action_entropy(dist: &ActionDistribution) -> f64 {
    entropy_of(&dist.probs)
}

pub(crate) fn entropy_of(probs: &[f64]) -> f64 {
    -probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Batch entropy: the sum of per-sample entropies.
pub fn batch_entropy(dists: &[ActionDistribution]) -> f64 {
    dists.iter().map(action_entropy).sum()
}

/// `KL(p‖q) = Σ pⱼ ln(pⱼ/qⱼ)`; `q` must be strictly positive.
pub fn kl_divergence(p: &ActionDistribution, q: &ActionDistribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(CrdaError::ShapeMismatch {
            context: "kl_divergence",
            expected: p.len(),
            actual: q.len(),
        });
    }
    if q.probs.iter().any(|x| *x <= 0.0) {
        return Err(CrdaError::Invalid("KL reference distribution has a zero entry".into()));
    }
    Ok(p.probs
        .iter()
        .zip(&q.probs)
        .filter(|(pj, _)| **pj > 0.0)
        .map(|(pj, qj)| pj * (pj / qj).ln())
        .sum())
}

/// Next policy state: the L2-normalized batch mean of the detector's
/// backbone latents on the augmented batch.
pub fn update_state(detector: &DetectorParams, batch: &[SyntheticSample]) -> Result<LatentState> {
    if batch.is_empty() {
        return Err(CrdaError::Empty("update_state batch"));
    }
    let mut mean = vec![0.0; detector.latent_dim()];
    for s in batch {
        let latent = detector.forward_latent(&s.features)?;
        for (m, l) in mean.iter_mut().zip(&latent) {
            *m += l;
        }
    }
    let n = batch.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(LatentState(l2_normalize(&mean)))
}
