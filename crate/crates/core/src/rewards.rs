//! Per-step reward for the augmentation policy.
//!
//! `r = λ₁·stability + λ₂·ΔAUC + λ₃·deception − λ₄·KL`

use serde::{Deserialize, Serialize};

use crate::detector::DetectorParams;
use crate::error::{CrdaError, Result};
use crate::nn::sigmoid;
use crate::policy::ActionDistribution;
use crate::schedules::OrganSet;
use crate::synthtask::{SyntheticSample, SyntheticTask};

/// AUC used as the previous value before the first evaluation.
pub const INITIAL_PREVIOUS_AUC: f64 = 0.5;

/// `(1/N)·Σ (1 − |pᵢ − yᵢ|)`
pub fn training_stability(pred_probs: &[f64], labels: &[f64]) -> Result<f64> {
    if pred_probs.is_empty() {
        return Err(CrdaError::Empty("training_stability batch"));
    }
    if pred_probs.len() != labels.len() {
        return Err(CrdaError::ShapeMismatch {
            context: "training_stability labels",
            expected: pred_probs.len(),
            actual: labels.len(),
        });
    }
    let total: f64 = pred_probs.iter().zip(labels).map(|(p, y)| 1.0 - (p - y).abs()).sum();
    Ok(total / pred_probs.len() as f64)
}

/// ROC AUC as the Mann–Whitney statistic with half credit for ties.
///
/// Labels are 0/1 with 1 the positive (fake) class. Sorting groups tied
/// scores, so the count of credited pairs is accumulated exactly as an
/// integer number of half-pairs.
pub fn roc_auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(CrdaError::ShapeMismatch {
            context: "roc_auc labels",
            expected: scores.len(),
            actual: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(CrdaError::non_finite("roc_auc scores"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let (mut n_pos, mut n_neg) = (0u64, 0u64);
    let mut half_credits = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] > 0.5 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        // Positives in this group beat every earlier negative and tie the
        // negatives inside the group.
        half_credits += 2 * pos * n_neg + pos * neg;
        n_pos += pos;
        n_neg += neg;
        i = j;
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(CrdaError::UndefinedAuc);
    }
    Ok((half_credits as f64 / 2.0) / (n_pos * n_neg) as f64)
}

/// `AUC⁽ᵗ⁾ − AUC⁽ᵗ⁻¹⁾`; use [`INITIAL_PREVIOUS_AUC`] at the first epoch.
pub fn delta_auc(current: f64, previous: f64) -> f64 {
    current - previous
}

/// Mean real-class probability the head assigns to the policy-weighted
/// mixture of backbone features of every operator applied to each real.
pub fn adversarial_deception(
    detector: &DetectorParams,
    dist: &ActionDistribution,
    reals: &[SyntheticSample],
    region: OrganSet,
    task: &SyntheticTask,
) -> Result<f64> {
    if reals.is_empty() {
        return Err(CrdaError::Empty("adversarial_deception batch"));
    }
    if reals.iter().any(SyntheticSample::is_fake) {
        return Err(CrdaError::Invalid(
            "adversarial_deception expects real samples only".into(),
        ));
    }
    let k = detector.latent_dim();
    let mut total = 0.0;
    for x in reals {
        let mut mixture = vec![0.0; k];
        for (op, &p) in dist.probs().iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let fake = task.apply_augmentation(x, op, region)?;
            let latent = detector.forward_latent(&fake.features)?;
            for (m, l) in mixture.iter_mut().zip(&latent) {
                *m += p * l;
            }
        }
        let (logit, _) = detector.classify(&mixture)?;
        total += 1.0 - sigmoid(logit);
    }
    Ok(total / reals.len() as f64)
}

/// Training-phase λ vectors and the phase boundaries (fractions of τ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub lambda_early: [f64; 4],
    pub lambda_mid: [f64; 4],
    pub lambda_late: [f64; 4],
    pub mid_start: f64,
    pub late_start: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda_early: [0.6, 0.2, 0.1, 0.1],
            lambda_mid: [0.3, 0.4, 0.2, 0.1],
            lambda_late: [0.2, 0.3, 0.4, 0.1],
            mid_start: 0.3,
            late_start: 0.7,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.mid_start && self.mid_start <= self.late_start && self.late_start <= 1.0) {
            return Err(CrdaError::out_of_range(
                "mid_start",
                format!(
                    "need 0 <= mid_start ({}) <= late_start ({}) <= 1",
                    self.mid_start, self.late_start
                ),
            ));
        }
        for (name, l) in [
            ("lambda_early", &self.lambda_early),
            ("lambda_mid", &self.lambda_mid),
            ("lambda_late", &self.lambda_late),
        ] {
            if l.iter().any(|x| !x.is_finite()) {
                return Err(CrdaError::out_of_range(name, "must be finite"));
            }
        }
        Ok(())
    }
}

pub fn lambda_schedule(t: f64, total_epochs: usize, cfg: &RewardConfig) -> Result<[f64; 4]> {
    let tau = total_epochs as f64;
    if !(t >= 0.0 && t <= tau) {
        return Err(CrdaError::out_of_range("epoch", format!("t = {t} outside [0, {tau}]")));
    }
    Ok(if t < cfg.mid_start * tau {
        cfg.lambda_early
    } else if t < cfg.late_start * tau {
        cfg.lambda_mid
    } else {
        cfg.lambda_late
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardComponents {
    pub stability: f64,
    pub delta_auc: f64,
    pub adversarial: f64,
    pub kl_term: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub stability: f64,
    pub delta_auc: f64,
    pub adversarial: f64,
    pub kl_term: f64,
    pub lambdas: [f64; 4],
    pub total: f64,
}

impl RewardBreakdown {
    pub fn components(&self) -> RewardComponents {
        RewardComponents {
            stability: self.stability,
            delta_auc: self.delta_auc,
            adversarial: self.adversarial,
            kl_term: self.kl_term,
        }
    }

    /// Recomputes the weighted total from the stored terms.
    pub fn recompute(&self) -> f64 {
        let l = self.lambdas;
        l[0] * self.stability + l[1] * self.delta_auc + l[2] * self.adversarial - l[3] * self.kl_term
    }
}

pub fn total_reward(c: RewardComponents, lambdas: [f64; 4]) -> Result<RewardBreakdown> {
    for (name, v) in [
        ("stability", c.stability),
        ("delta_auc", c.delta_auc),
        ("adversarial", c.adversarial),
        ("kl_term", c.kl_term),
    ] {
        if !v.is_finite() {
            return Err(CrdaError::non_finite(format!("reward term {name}")));
        }
    }
    let mut b = RewardBreakdown {
        stability: c.stability,
        delta_auc: c.delta_auc,
        adversarial: c.adversarial,
        kl_term: c.kl_term,
        lambdas,
        total: 0.0,
    };
    b.total = b.recompute();
    Ok(b)
}
