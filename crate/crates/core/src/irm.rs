//! Invariant-risk objective over the environment queues.
//!
//! The penalty for an environment is the squared derivative of its mean
//! cross-entropy with respect to a scalar multiplier on the detector logit,
//! evaluated at multiplier 1:
//!
//! ```text
//! penalty = ( mean_i (σ(zᵢ) − yᵢ) · zᵢ )²
//! ```

use serde::{Deserialize, Serialize};

use crate::detector::{logit_bce, BiasTerms, DetectorParams};
use crate::error::{CrdaError, Result};
use crate::nn::sigmoid;
use crate::synthtask::SyntheticSample;

/// Where the gradient penalty sits relative to the environment weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PenaltyWeighting {
    /// `Σ w_m (risk_m + Ω·penalty_m)`
    #[default]
    Weighted,
    /// `Σ w_m risk_m + Ω Σ penalty_m`
    Unweighted,
}

impl PenaltyWeighting {
    pub fn as_str(self) -> &'static str {
        match self {
            PenaltyWeighting::Weighted => "weighted",
            PenaltyWeighting::Unweighted => "unweighted",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "weighted" => Some(Self::Weighted),
            "unweighted" => Some(Self::Unweighted),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasLossReport {
    pub per_env_risk: Vec<f64>,
    pub per_env_penalty: Vec<f64>,
    pub weights: Vec<f64>,
    pub omega: f64,
    pub bias_loss: f64,
}

impl BiasLossReport {
    pub fn empty(num_envs: usize, omega: f64) -> Self {
        Self {
            per_env_risk: vec![0.0; num_envs],
            per_env_penalty: vec![0.0; num_envs],
            weights: vec![0.0; num_envs],
            omega,
            bias_loss: 0.0,
        }
    }
}

pub fn risk_from_logits(logits: &[f64], labels: &[f64]) -> f64 {
    logits.iter().zip(labels).map(|(z, y)| logit_bce(*z, *y)).sum::<f64>() / logits.len() as f64
}

/// `∂/∂w mean BCE(σ(w·zᵢ), yᵢ)` at `w = 1`.
pub fn penalty_scale_gradient(logits: &[f64], labels: &[f64]) -> f64 {
    logits
        .iter()
        .zip(labels)
        .map(|(z, y)| (sigmoid(*z) - y) * z)
        .sum::<f64>()
        / logits.len() as f64
}

pub fn penalty_from_logits(logits: &[f64], labels: &[f64]) -> f64 {
    penalty_scale_gradient(logits, labels).powi(2)
}

fn logits_and_labels(detector: &DetectorParams, samples: &[SyntheticSample]) -> Result<(Vec<f64>, Vec<f64>)> {
    if samples.is_empty() {
        return Err(CrdaError::Empty("environment samples"));
    }
    let logits = detector.logits(samples)?;
    let labels = samples.iter().map(SyntheticSample::label_f64).collect();
    Ok((logits, labels))
}

/// Mean cross-entropy of the detector over one environment.
pub fn environment_risk(detector: &DetectorParams, samples: &[SyntheticSample]) -> Result<f64> {
    let (z, y) = logits_and_labels(detector, samples)?;
    Ok(risk_from_logits(&z, &y))
}

pub fn irm_penalty(detector: &DetectorParams, samples: &[SyntheticSample]) -> Result<f64> {
    let (z, y) = logits_and_labels(detector, samples)?;
    Ok(penalty_from_logits(&z, &y))
}

fn check_terms(terms: &BiasTerms<'_>) -> Result<()> {
    if terms.environments.len() != terms.weights.len() {
        return Err(CrdaError::ShapeMismatch {
            context: "bias loss weights",
            expected: terms.environments.len(),
            actual: terms.weights.len(),
        });
    }
    Ok(())
}

fn penalty_factor(terms: &BiasTerms<'_>, weight: f64) -> f64 {
    match terms.weighting {
        PenaltyWeighting::Weighted => weight * terms.omega,
        PenaltyWeighting::Unweighted => terms.omega,
    }
}

/// Weighted risk-plus-penalty over the non-empty environments.
pub fn bias_loss(detector: &DetectorParams, terms: &BiasTerms<'_>) -> Result<BiasLossReport> {
    check_terms(terms)?;
    let m = terms.environments.len();
    let mut report = BiasLossReport::empty(m, terms.omega);
    report.weights = terms.weights.to_vec();
    if terms.environments.iter().all(|e| e.is_empty()) {
        log::warn!("bias loss requested with every environment empty; using 0");
        return Ok(report);
    }
    let mut total = 0.0;
    for (k, env) in terms.environments.iter().enumerate() {
        if env.is_empty() {
            continue;
        }
        let (z, y) = logits_and_labels(detector, env)?;
        let risk = risk_from_logits(&z, &y);
        let penalty = penalty_from_logits(&z, &y);
        report.per_env_risk[k] = risk;
        report.per_env_penalty[k] = penalty;
        total += terms.weights[k] * risk + penalty_factor(terms, terms.weights[k]) * penalty;
    }
    if !total.is_finite() {
        return Err(CrdaError::non_finite("bias loss"));
    }
    report.bias_loss = total;
    Ok(report)
}

/// Per-sample `∂L_bias/∂zᵢ` for every queued sample; the environment
/// weights are treated as constants.
pub(crate) fn bias_logit_coefficients<'a>(
    detector: &DetectorParams,
    terms: &BiasTerms<'a>,
) -> Result<(Vec<&'a [f64]>, Vec<f64>)> {
    check_terms(terms)?;
    let mut inputs = Vec::new();
    let mut coefs = Vec::new();
    for (k, env) in terms.environments.iter().enumerate() {
        if env.is_empty() {
            continue;
        }
        let (z, y) = logits_and_labels(detector, env)?;
        let n = env.len() as f64;
        let w = terms.weights[k];
        let pen = 2.0 * penalty_scale_gradient(&z, &y) * penalty_factor(terms, w);
        for ((s, zi), yi) in env.iter().zip(&z).zip(&y) {
            let p = sigmoid(*zi);
            let risk_part = w * (p - yi);
            let penalty_part = pen * (p * (1.0 - p) * zi + p - yi);
            inputs.push(s.features.as_slice());
            coefs.push((risk_part + penalty_part) / n);
        }
    }
    Ok((inputs, coefs))
}

/// `L_CE + γ·L_bias`.
pub fn total_loss(ce_loss: f64, bias_loss: f64, gamma: f64) -> Result<f64> {
    for (name, v) in [("ce_loss", ce_loss), ("bias_loss", bias_loss), ("gamma", gamma)] {
        if !v.is_finite() {
            return Err(CrdaError::non_finite(name));
        }
    }
    Ok(ce_loss + gamma * bias_loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Mean BCE with the logit scaled by a dummy multiplier `w`.
    fn dummy_scaled_risk(z: &[f64], y: &[f64], w: f64) -> f64 {
        let scaled: Vec<f64> = z.iter().map(|zi| w * zi).collect();
        risk_from_logits(&scaled, y)
    }

    fn fd_penalty(z: &[f64], y: &[f64]) -> f64 {
        let h = 1e-6;
        let d = (dummy_scaled_risk(z, y, 1.0 + h) - dummy_scaled_risk(z, y, 1.0 - h)) / (2.0 * h);
        d * d
    }

    #[test]
    fn penalty_zero_logit() {
        assert_eq!(penalty_from_logits(&[0.0], &[1.0]), 0.0);
        assert_eq!(penalty_from_logits(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn penalty_single_positive_logit() {
        let p = penalty_from_logits(&[2.0], &[1.0]);
        assert!((p - 0.056838).abs() < 1e-6);
        assert!((p - fd_penalty(&[2.0], &[1.0])).abs() < 1e-8);
    }

    #[test]
    fn penalty_symmetric_pair_matches_finite_differences() {
        let z = 1.3;
        let logits = [z, -z];
        let labels = [1.0, 0.0];
        let p = penalty_from_logits(&logits, &labels);
        let closed = (2.0 * (sigmoid(z) - 1.0) * z / 2.0).powi(2);
        assert!((p - closed).abs() < 1e-15);
        assert!((p - fd_penalty(&logits, &labels)).abs() < 1e-8);
    }

    #[test]
    fn penalty_vanishes_when_scale_gradient_cancels() {
        // Zero logits: every (σ(z) − y)·z term is exactly 0.
        assert_eq!(penalty_from_logits(&[0.0, 0.0, 0.0], &[1.0, 0.0, 1.0]), 0.0);
        // Calibrated soft labels: σ(z) − y = 0 termwise.
        let z = [0.8, -1.1];
        let y = [sigmoid(0.8), sigmoid(-1.1)];
        assert_eq!(penalty_from_logits(&z, &y), 0.0);
        // Mirrored pair with label swap: contributions cancel only at z = 0.
        assert!(penalty_from_logits(&[0.8, 0.8], &[1.0, 0.0]) > 0.0);
    }

    #[test]
    fn risk_values() {
        assert!((risk_from_logits(&[0.0, 0.0], &[1.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        assert!(risk_from_logits(&[60.0, -60.0], &[1.0, 0.0]) < 1e-11);
        let z = [0.3, -1.2, 2.0];
        let y = [1.0, 0.0, 0.0];
        let by_hand = (-(sigmoid(0.3).ln()) - (1.0 - sigmoid(-1.2)).ln() - (1.0 - sigmoid(2.0)).ln()) / 3.0;
        assert!((risk_from_logits(&z, &y) - by_hand).abs() < 1e-14);
    }

    #[test]
    fn total_loss_cases() {
        assert_eq!(total_loss(1.0, 0.0, 0.5).unwrap(), 1.0);
        assert!((total_loss(0.7, 0.2, 0.5).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(total_loss(0.7, 123.0, 0.0).unwrap(), 0.7);
        assert!(total_loss(f64::NAN, 0.0, 0.5).is_err());
    }
}
