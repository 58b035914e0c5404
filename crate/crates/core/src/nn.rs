//! Small dense-layer building blocks shared by the detector, the policy and
//! the critic, plus the Adam optimizer that updates them.
//!
//! Every parameter container implements [`ParamSet`], which exposes its
//! tensors as named flat slices. Optimizers, gradient checks and the
//! checkpoint writer all operate through that view.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CrdaError, Result};

/// Affine layer `y = W x + b` with `W` stored row-major (`outputs × inputs`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Uniform `±1/√fan_in` initialization for weights and biases.
    pub fn uniform<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        let weight = draw(inputs * outputs);
        let bias = draw(outputs);
        Self {
            inputs,
            outputs,
            weight,
            bias,
        }
    }

    pub fn check_input(&self, x: &[f64], context: &'static str) -> Result<()> {
        if x.len() != self.inputs {
            return Err(CrdaError::ShapeMismatch {
                context,
                expected: self.inputs,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Callers guarantee `x.len() == self.inputs`.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        self.weight
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b)
            .collect()
    }

    /// Accumulates `∂L/∂W` and `∂L/∂b` into `grad` given the upstream
    /// gradient `grad_out = ∂L/∂y`, and returns `∂L/∂x`.
    pub fn backward(&self, x: &[f64], grad_out: &[f64], grad: &mut Dense) -> Vec<f64> {
        let mut grad_in = vec![0.0; self.inputs];
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            let grow = &mut grad.weight[o * self.inputs..(o + 1) * self.inputs];
            for i in 0..self.inputs {
                grow[i] += g * x[i];
                grad_in[i] += g * row[i];
            }
        }
        grad_in
    }
}

pub fn relu_in_place(v: &mut [f64]) {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Zeroes upstream gradient entries where the relu output was clamped.
pub fn relu_backward_in_place(grad: &mut [f64], activated: &[f64]) {
    for (g, a) in grad.iter_mut().zip(activated) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Returns `v / ‖v‖₂`, or `v` unchanged when its norm is zero.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter().map(|x| x / norm).collect()
    } else {
        v.to_vec()
    }
}

/// A collection of named, flat parameter tensors.
pub trait ParamSet: Clone {
    fn tensors(&self) -> Vec<(&'static str, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, t)| t.iter().copied())
            .collect()
    }

    fn squared_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|(_, t)| t.iter()).map(|x| x * x).sum()
    }

    fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Names the first tensor holding a non-finite entry.
    fn first_non_finite(&self) -> Option<&'static str> {
        self.tensors()
            .into_iter()
            .find(|(_, t)| t.iter().any(|x| !x.is_finite()))
            .map(|(name, _)| name)
    }

    /// Calls `f(name, index, value)` on each scalar parameter, allowing mutation.
    fn for_each_param_mut(&mut self, mut f: impl FnMut(&'static str, usize, &mut f64)) {
        for (name, t) in self.tensors_mut() {
            for (i, x) in t.iter_mut().enumerate() {
                f(name, i, x);
            }
        }
    }
}

/// `self += factor * other`, tensor by tensor.
pub fn add_scaled<P: ParamSet>(target: &mut P, other: &P, factor: f64) {
    for ((_, t), (_, o)) in target.tensors_mut().into_iter().zip(other.tensors()) {
        for (a, b) in t.iter_mut().zip(o) {
            *a += factor * b;
        }
    }
}

/// Rescales gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<P: ParamSet>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.squared_norm().sqrt();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) weight decay.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment accumulators shaped like the parameters they track.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<P> {
    pub m: P,
    pub v: P,
    pub step: u64,
}

impl<P: ParamSet> AdamState<P> {
    pub fn new(params: &P) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    /// One bias-corrected Adam step with decoupled weight decay.
    pub fn step(&mut self, params: &mut P, grads: &P, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for ((((_, p), (_, g)), (_, m)), (_, v)) in tensors {
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * p[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, PartialEq)]
    struct Scalar(Vec<f64>);

    impl ParamSet for Scalar {
        fn tensors(&self) -> Vec<(&'static str, &[f64])> {
            vec![("x", &self.0)]
        }
        fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
            vec![("x", &mut self.0)]
        }
    }

    #[test]
    fn adam_single_step_matches_hand_computation() {
        // m = 0.1, v = 0.001; bias-corrected both become 1.
        let cfg = AdamConfig::with_lr(1e-3);
        let mut p = Scalar(vec![0.5]);
        let mut st = AdamState::new(&p);
        st.step(&mut p, &Scalar(vec![1.0]), &cfg);
        let expected = 0.5 - 1e-3 * (1.0 / (1.0 + 1e-8));
        assert!((p.0[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_no_decay_is_identity() {
        let cfg = AdamConfig::default();
        let mut p = Scalar(vec![0.3, -1.2]);
        let before = p.clone();
        let mut st = AdamState::new(&p);
        for _ in 0..10 {
            st.step(&mut p, &Scalar(vec![0.0, 0.0]), &cfg);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn dense_backward_matches_manual() {
        let layer = Dense {
            inputs: 2,
            outputs: 2,
            weight: vec![1.0, 2.0, -1.0, 0.5],
            bias: vec![0.1, -0.2],
        };
        let x = [1.0, 1.0];
        assert_eq!(layer.forward(&x), vec![3.1, -0.7]);
        let mut g = Dense::zeros(2, 2);
        let gin = layer.backward(&x, &[1.0, 2.0], &mut g);
        assert_eq!(gin, vec![1.0 - 2.0, 2.0 + 1.0]);
        assert_eq!(g.weight, vec![1.0, 1.0, 2.0, 2.0]);
        assert_eq!(g.bias, vec![1.0, 2.0]);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax(&[0.3, -1.0, 2.0]);
        let b = softmax(&[100.3, 99.0, 102.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_grad_norm_caps_norm() {
        let mut g = Scalar(vec![3.0, 4.0]);
        let before = clip_grad_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((g.squared_norm().sqrt() - 1.0).abs() < 1e-12);
    }
}
