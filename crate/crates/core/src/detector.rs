//! The detector: a relu-MLP backbone producing a latent vector and an
//! affine head producing the fake-class logit, with analytic gradients.
//!
//! Every loss the engine trains on (cross-entropy, the environment bias
//! loss, and their sum) is a function of per-sample logits only, so the
//! backward pass is expressed as a weighted sum of per-sample logit
//! gradients: callers supply `∂L/∂zᵢ` and [`DetectorParams::backward`]
//! pushes it through head and backbone.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CrdaError, Result};
use crate::gradcheck::{check_gradient, GradCheckReport, DEFAULT_STEP};
use crate::irm::{self, PenaltyWeighting};
use crate::nn::{relu_backward_in_place, relu_in_place, sigmoid, Dense, ParamSet};
use crate::synthtask::SyntheticSample;

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorDims {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub backbone1: Dense,
    pub backbone2: Dense,
    pub head: Dense,
}

impl ParamSet for DetectorParams {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("detector.backbone.w1", &self.backbone1.weight),
            ("detector.backbone.b1", &self.backbone1.bias),
            ("detector.backbone.w2", &self.backbone2.weight),
            ("detector.backbone.b2", &self.backbone2.bias),
            ("detector.head.w", &self.head.weight),
            ("detector.head.b", &self.head.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("detector.backbone.w1", &mut self.backbone1.weight),
            ("detector.backbone.b1", &mut self.backbone1.bias),
            ("detector.backbone.w2", &mut self.backbone2.weight),
            ("detector.backbone.b2", &mut self.backbone2.bias),
            ("detector.head.w", &mut self.head.weight),
            ("detector.head.b", &mut self.head.bias),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct DetectorForward {
    pub hidden: Vec<f64>,
    pub latent: Vec<f64>,
    pub logit: f64,
}

impl DetectorForward {
    pub fn prob_fake(&self) -> f64 {
        sigmoid(self.logit)
    }
}

impl DetectorParams {
    pub fn zeros(dims: DetectorDims) -> Self {
        Self {
            backbone1: Dense::zeros(dims.input_dim, dims.hidden_dim),
            backbone2: Dense::zeros(dims.hidden_dim, dims.latent_dim),
            head: Dense::zeros(dims.latent_dim, 1),
        }
    }

    pub fn init<R: Rng + ?Sized>(dims: DetectorDims, rng: &mut R) -> Self {
        Self {
            backbone1: Dense::uniform(dims.input_dim, dims.hidden_dim, rng),
            backbone2: Dense::uniform(dims.hidden_dim, dims.latent_dim, rng),
            head: Dense::uniform(dims.latent_dim, 1, rng),
        }
    }

    pub fn dims(&self) -> DetectorDims {
        DetectorDims {
            input_dim: self.backbone1.inputs,
            hidden_dim: self.backbone1.outputs,
            latent_dim: self.backbone2.outputs,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.backbone2.outputs
    }

    pub fn forward(&self, input: &[f64]) -> Result<DetectorForward> {
        self.backbone1.check_input(input, "detector input")?;
        let mut hidden = self.backbone1.forward(input);
        relu_in_place(&mut hidden);
        let mut latent = self.backbone2.forward(&hidden);
        relu_in_place(&mut latent);
        let logit = self.head.forward(&latent)[0];
        Ok(DetectorForward { hidden, latent, logit })
    }

    /// Backbone features `f_α(x)`.
    pub fn forward_latent(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(input)?.latent)
    }

    /// Head `g_β`: returns `(logit, P(fake))`.
    pub fn classify(&self, latent: &[f64]) -> Result<(f64, f64)> {
        self.head.check_input(latent, "detector latent")?;
        let logit = self.head.forward(latent)[0];
        Ok((logit, sigmoid(logit)))
    }

    pub fn logit(&self, input: &[f64]) -> Result<f64> {
        Ok(self.forward(input)?.logit)
    }

    pub fn logits(&self, samples: &[SyntheticSample]) -> Result<Vec<f64>> {
        samples.iter().map(|s| self.logit(&s.features)).collect()
    }

    /// Accumulates `Σᵢ coefᵢ · ∂zᵢ/∂θ` into `grads`.
    pub fn backward_into(&self, inputs: &[&[f64]], logit_coefs: &[f64], grads: &mut DetectorParams) -> Result<()> {
        if inputs.len() != logit_coefs.len() {
            return Err(CrdaError::ShapeMismatch {
                context: "detector backward coefficients",
                expected: inputs.len(),
                actual: logit_coefs.len(),
            });
        }
        for (x, &c) in inputs.iter().zip(logit_coefs) {
            if c == 0.0 {
                continue;
            }
            let fwd = self.forward(x)?;
            let mut g_latent = self.head.backward(&fwd.latent, &[c], &mut grads.head);
            relu_backward_in_place(&mut g_latent, &fwd.latent);
            let mut g_hidden = self.backbone2.backward(&fwd.hidden, &g_latent, &mut grads.backbone2);
            relu_backward_in_place(&mut g_hidden, &fwd.hidden);
            self.backbone1.backward(x, &g_hidden, &mut grads.backbone1);
        }
        Ok(())
    }

    /// Analytic gradients of the loss selected by `spec`.
    pub fn backward(&self, spec: &LossSpec<'_>) -> Result<DetectorParams> {
        let (inputs, coefs) = spec.logit_coefficients(self)?;
        let mut grads = self.zeros_like();
        self.backward_into(&inputs, &coefs, &mut grads)?;
        if let Some(name) = grads.first_non_finite() {
            return Err(CrdaError::non_finite(format!("gradient of {name}")));
        }
        Ok(grads)
    }
}

/// Binary cross-entropy of a single logit with probability flooring.
pub fn logit_bce(logit: f64, label: f64) -> f64 {
    let p = sigmoid(logit).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

/// Mean binary cross-entropy over fake-class probabilities.
pub fn ce_loss(probs: &[f64], labels: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(CrdaError::Empty("ce_loss batch"));
    }
    if probs.len() != labels.len() {
        return Err(CrdaError::ShapeMismatch {
            context: "ce_loss labels",
            expected: probs.len(),
            actual: labels.len(),
        });
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, y)| {
            let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// Environment sample sets plus the weights and penalty scale of the bias loss.
#[derive(Debug, Clone, Copy)]
pub struct BiasTerms<'a> {
    pub environments: &'a [&'a [SyntheticSample]],
    pub weights: &'a [f64],
    pub omega: f64,
    pub weighting: PenaltyWeighting,
}

#[derive(Debug, Clone, Copy)]
pub enum LossSpec<'a> {
    Ce(&'a [SyntheticSample]),
    Bias(BiasTerms<'a>),
    Total {
        batch: &'a [SyntheticSample],
        bias: BiasTerms<'a>,
        gamma: f64,
    },
}

impl<'a> LossSpec<'a> {
    pub fn value(&self, detector: &DetectorParams) -> Result<f64> {
        match self {
            LossSpec::Ce(batch) => ce_of(detector, batch),
            LossSpec::Bias(b) => Ok(irm::bias_loss(detector, b)?.bias_loss),
            LossSpec::Total { batch, bias, gamma } => irm::total_loss(
                ce_of(detector, batch)?,
                irm::bias_loss(detector, bias)?.bias_loss,
                *gamma,
            ),
        }
    }

    fn logit_coefficients(&self, detector: &DetectorParams) -> Result<(Vec<&'a [f64]>, Vec<f64>)> {
        match self {
            LossSpec::Ce(batch) => {
                let coefs = ce_logit_coefficients(detector, batch)?;
                Ok((batch.iter().map(|s| s.features.as_slice()).collect(), coefs))
            }
            LossSpec::Bias(b) => irm::bias_logit_coefficients(detector, b),
            LossSpec::Total { batch, bias, gamma } => {
                let mut inputs: Vec<&'a [f64]> = batch.iter().map(|s| s.features.as_slice()).collect();
                let mut coefs = ce_logit_coefficients(detector, batch)?;
                let (bias_inputs, bias_coefs) = irm::bias_logit_coefficients(detector, bias)?;
                inputs.extend(bias_inputs);
                coefs.extend(bias_coefs.into_iter().map(|c| gamma * c));
                Ok((inputs, coefs))
            }
        }
    }
}

fn ce_of(detector: &DetectorParams, batch: &[SyntheticSample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(CrdaError::Empty("ce_loss batch"));
    }
    let total: f64 = batch
        .iter()
        .map(|s| Ok(logit_bce(detector.logit(&s.features)?, s.label_f64())))
        .sum::<Result<f64>>()?;
    Ok(total / batch.len() as f64)
}

/// `∂L_CE/∂zᵢ = (σ(zᵢ) − yᵢ)/N`.
fn ce_logit_coefficients(detector: &DetectorParams, batch: &[SyntheticSample]) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(CrdaError::Empty("ce_loss batch"));
    }
    let n = batch.len() as f64;
    batch
        .iter()
        .map(|s| Ok((sigmoid(detector.logit(&s.features)?) - s.label_f64()) / n))
        .collect()
}

/// Central-difference check of [`DetectorParams::backward`] for `spec`.
pub fn gradient_check(detector: &DetectorParams, spec: &LossSpec<'_>) -> Result<GradCheckReport> {
    let analytic = detector.backward(spec)?;
    Ok(check_gradient(detector, &analytic, DEFAULT_STEP, |p| {
        spec.value(p).unwrap_or(f64::NAN)
    }))
}
