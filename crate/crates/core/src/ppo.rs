//! PPO-Clip for the augmentation policy: GAE advantages, a small MLP
//! critic, and full-batch clipped-surrogate updates with an entropy bonus.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CrdaError, Result};
use crate::nn::{clip_grad_norm, relu_backward_in_place, relu_in_place, AdamConfig, AdamState, Dense, ParamSet};
use crate::policy::{entropy_of, kl_divergence, LatentState, PolicyParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub clip: f64,
    pub update_epochs: usize,
    pub lr: f64,
    pub gae_lambda: f64,
    pub discount: f64,
    pub max_grad_norm: f64,
    pub value_coef: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            update_epochs: 4,
            lr: 3e-5,
            gae_lambda: 0.8,
            discount: 0.95,
            max_grad_norm: 1.0,
            value_coef: 0.5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(CrdaError::out_of_range("clip", format!("{} not in (0,1)", self.clip)));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(CrdaError::out_of_range(
                "gae_lambda",
                format!("{} not in [0,1]", self.gae_lambda),
            ));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(CrdaError::out_of_range(
                "discount",
                format!("{} not in (0,1]", self.discount),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(CrdaError::out_of_range("lr", "must be > 0"));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(CrdaError::out_of_range("max_grad_norm", "must be > 0"));
        }
        if !(self.value_coef >= 0.0) {
            return Err(CrdaError::out_of_range("value_coef", "must be >= 0"));
        }
        if self.update_epochs < 1 {
            return Err(CrdaError::out_of_range("update_epochs", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticParams {
    pub hidden: Dense,
    pub output: Dense,
}

impl ParamSet for CriticParams {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("critic.w1", &self.hidden.weight),
            ("critic.b1", &self.hidden.bias),
            ("critic.w2", &self.output.weight),
            ("critic.b2", &self.output.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("critic.w1", &mut self.hidden.weight),
            ("critic.b1", &mut self.hidden.bias),
            ("critic.w2", &mut self.output.weight),
            ("critic.b2", &mut self.output.bias),
        ]
    }
}

impl CriticParams {
    pub fn zeros(state_dim: usize, hidden_dim: usize) -> Self {
        Self {
            hidden: Dense::zeros(state_dim, hidden_dim),
            output: Dense::zeros(hidden_dim, 1),
        }
    }

    pub fn init<R: Rng + ?Sized>(state_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        Self {
            hidden: Dense::uniform(state_dim, hidden_dim, rng),
            output: Dense::uniform(hidden_dim, 1, rng),
        }
    }

    fn forward_cached(&self, state: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.hidden.check_input(state, "critic state")?;
        let mut h = self.hidden.forward(state);
        relu_in_place(&mut h);
        let v = self.output.forward(&h)[0];
        Ok((h, v))
    }

    fn backward(&self, state: &[f64], hidden: &[f64], grad_value: f64, grads: &mut CriticParams) {
        let mut gh = self.output.backward(hidden, &[grad_value], &mut grads.output);
        relu_backward_in_place(&mut gh, hidden);
        self.hidden.backward(state, &gh, &mut grads.hidden);
    }
}

pub fn critic_forward(critic: &CriticParams, state: &LatentState) -> Result<f64> {
    Ok(critic.forward_cached(state.as_slice())?.1)
}

pub fn critic_forward_batch(critic: &CriticParams, states: &[LatentState]) -> Result<Vec<f64>> {
    states.iter().map(|s| critic_forward(critic, s)).collect()
}

/// One episode of policy interaction. `values` carries a trailing bootstrap.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<LatentState>,
    pub actions: Vec<usize>,
    pub old_logprobs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.actions.len();
        for (name, len) in [
            ("states", self.states.len()),
            ("old_logprobs", self.old_logprobs.len()),
            ("rewards", self.rewards.len()),
        ] {
            if len != t {
                return Err(CrdaError::Invalid(format!(
                    "trajectory {name} has length {len}, expected {t}"
                )));
            }
        }
        if self.values.len() != t + 1 {
            return Err(CrdaError::Invalid(format!(
                "trajectory values has length {}, expected {}",
                self.values.len(),
                t + 1
            )));
        }
        let all = self.old_logprobs.iter().chain(&self.rewards).chain(&self.values);
        if all.clone().any(|x| !x.is_finite()) {
            return Err(CrdaError::non_finite("trajectory"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaeOutput {
    /// Advantages before normalization.
    pub raw_advantages: Vec<f64>,
    /// Zero-mean/unit-variance advantages when `T > 1`, else the raw ones.
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Generalized advantage estimation over `rewards` with bootstrapped `values`.
pub fn compute_gae(rewards: &[f64], values: &[f64], discount: f64, lambda: f64) -> Result<GaeOutput> {
    let t = rewards.len();
    if values.len() != t + 1 {
        return Err(CrdaError::ShapeMismatch {
            context: "gae values (with bootstrap)",
            expected: t + 1,
            actual: values.len(),
        });
    }
    let mut raw = vec![0.0; t];
    let mut acc = 0.0;
    for i in (0..t).rev() {
        let delta = rewards[i] + discount * values[i + 1] - values[i];
        acc = delta + discount * lambda * acc;
        raw[i] = acc;
    }
    let returns = raw.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok(GaeOutput {
        advantages: normalize(&raw),
        raw_advantages: raw,
        returns,
    })
}

fn normalize(xs: &[f64]) -> Vec<f64> {
    if xs.len() < 2 {
        return xs.to_vec();
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    xs.iter().map(|x| (x - mean) / (std + 1e-8)).collect()
}

/// `min(ρA, clip(ρ, 1−ε, 1+ε)A)`
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * advantage;
    unclipped.min(clipped)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyObjective {
    /// `−mean(surrogate) − β·mean(entropy)`
    pub loss: f64,
    pub grads: PolicyParams,
    pub surrogate: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
}

/// Clipped-surrogate loss with entropy bonus and its exact gradient.
pub fn policy_objective(
    policy: &PolicyParams,
    states: &[LatentState],
    actions: &[usize],
    old_logprobs: &[f64],
    advantages: &[f64],
    clip: f64,
    beta: f64,
) -> Result<PolicyObjective> {
    let t = actions.len();
    if t == 0 {
        return Err(CrdaError::Empty("policy objective trajectory"));
    }
    let n = t as f64;
    let mut grads = policy.zeros_like();
    let (mut surrogate, mut entropy, mut ratio_sum, mut clipped) = (0.0, 0.0, 0.0, 0usize);
    for i in 0..t {
        let s = states[i].as_slice();
        let fwd = policy.forward_cached(s)?;
        let p = fwd.dist.probs();
        let a = actions[i];
        let ratio = (p[a].ln() - old_logprobs[i]).exp();
        let adv = advantages[i];
        let h = entropy_of(p);
        let unclipped = ratio * adv;
        let clipped_term = ratio.clamp(1.0 - clip, 1.0 + clip) * adv;
        surrogate += unclipped.min(clipped_term);
        entropy += h;
        ratio_sum += ratio;
        if (ratio - 1.0).abs() > clip {
            clipped += 1;
        }
        // ∂loss/∂logits for this state.
        let surrogate_active = unclipped <= clipped_term;
        let grad_logits: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(j, &pj)| {
                let onehot = if j == a { 1.0 } else { 0.0 };
                let g_sur = if surrogate_active {
                    -adv * ratio * (onehot - pj)
                } else {
                    0.0
                };
                let g_ent = if pj > 0.0 { beta * pj * (pj.ln() + h) } else { 0.0 };
                (g_sur + g_ent) / n
            })
            .collect();
        policy.backward(s, &fwd, &grad_logits, &mut grads);
    }
    let surrogate = surrogate / n;
    let entropy = entropy / n;
    if !surrogate.is_finite() {
        return Err(CrdaError::non_finite("ppo clipped surrogate"));
    }
    if !entropy.is_finite() {
        return Err(CrdaError::non_finite("ppo entropy bonus"));
    }
    Ok(PolicyObjective {
        loss: -surrogate - beta * entropy,
        grads,
        surrogate,
        entropy,
        mean_ratio: ratio_sum / n,
        clip_fraction: clipped as f64 / n,
    })
}

/// `value_coef · mean (V(s) − R)²` and its gradient.
pub fn value_objective(
    critic: &CriticParams,
    states: &[LatentState],
    returns: &[f64],
    value_coef: f64,
) -> Result<(f64, CriticParams)> {
    if states.len() != returns.len() {
        return Err(CrdaError::ShapeMismatch {
            context: "value targets",
            expected: states.len(),
            actual: returns.len(),
        });
    }
    if states.is_empty() {
        return Err(CrdaError::Empty("value objective states"));
    }
    let n = states.len() as f64;
    let mut grads = critic.zeros_like();
    let mut loss = 0.0;
    for (s, r) in states.iter().zip(returns) {
        let (h, v) = critic.forward_cached(s.as_slice())?;
        let err = v - r;
        loss += err * err;
        critic.backward(s.as_slice(), &h, 2.0 * value_coef * err / n, &mut grads);
    }
    let loss = value_coef * loss / n;
    if !loss.is_finite() {
        return Err(CrdaError::non_finite("ppo value loss"));
    }
    Ok((loss, grads))
}

/// Adam moments for the policy and the critic.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoOptimizer {
    pub policy: AdamState<PolicyParams>,
    pub critic: AdamState<CriticParams>,
}

impl PpoOptimizer {
    pub fn new(policy: &PolicyParams, critic: &CriticParams) -> Self {
        Self {
            policy: AdamState::new(policy),
            critic: AdamState::new(critic),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PpoStats {
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    /// Mean over trajectory states of `KL(π_old ‖ π_new)`.
    pub kl_old_new: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

pub fn ppo_update(
    policy: &PolicyParams,
    critic: &CriticParams,
    opt: &mut PpoOptimizer,
    traj: &Trajectory,
    cfg: &PpoConfig,
    entropy_coef: f64,
) -> Result<(PolicyParams, CriticParams, PpoStats)> {
    traj.validate()?;
    if traj.is_empty() {
        return Err(CrdaError::Empty("ppo trajectory"));
    }
    let gae = compute_gae(&traj.rewards, &traj.values, cfg.discount, cfg.gae_lambda)?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut new_policy = policy.clone();
    let mut new_critic = critic.clone();
    let mut stats = PpoStats::default();
    for _ in 0..cfg.update_epochs {
        let mut obj = policy_objective(
            &new_policy,
            &traj.states,
            &traj.actions,
            &traj.old_logprobs,
            &gae.advantages,
            cfg.clip,
            entropy_coef,
        )?;
        let (value_loss, mut vgrads) = value_objective(&new_critic, &traj.states, &gae.returns, cfg.value_coef)?;
        clip_grad_norm(&mut obj.grads, cfg.max_grad_norm);
        clip_grad_norm(&mut vgrads, cfg.max_grad_norm);
        opt.policy.step(&mut new_policy, &obj.grads, &adam);
        opt.critic.step(&mut new_critic, &vgrads, &adam);
        stats.policy_loss = obj.loss;
        stats.value_loss = value_loss;
    }
    if let Some(name) = new_policy.first_non_finite() {
        return Err(CrdaError::non_finite(format!("ppo update of {name}")));
    }
    if let Some(name) = new_critic.first_non_finite() {
        return Err(CrdaError::non_finite(format!("ppo update of {name}")));
    }

    let post = policy_objective(
        &new_policy,
        &traj.states,
        &traj.actions,
        &traj.old_logprobs,
        &gae.advantages,
        cfg.clip,
        entropy_coef,
    )?;
    stats.mean_ratio = post.mean_ratio;
    stats.clip_fraction = post.clip_fraction;
    stats.entropy = post.entropy;
    let mut kl = 0.0;
    for s in &traj.states {
        let old = policy.forward_cached(s.as_slice())?.dist;
        let new = new_policy.forward_cached(s.as_slice())?.dist;
        kl += kl_divergence(&old, &new)?;
    }
    stats.kl_old_new = kl / traj.len() as f64;
    if !stats.kl_old_new.is_finite() {
        return Err(CrdaError::non_finite("ppo KL(old||new)"));
    }
    Ok((new_policy, new_critic, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, DEFAULT_STEP};
    use crate::policy::{policy_forward, sample_action};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct double-loop `A_t = Σ_l (γλ)^l δ_{t+l}`.
    fn brute_force_gae(r: &[f64], v: &[f64], g: f64, l: f64) -> Vec<f64> {
        let t = r.len();
        (0..t)
            .map(|i| {
                (i..t)
                    .map(|j| (g * l).powi((j - i) as i32) * (r[j] + g * v[j + 1] - v[j]))
                    .sum()
            })
            .collect()
    }

    #[test]
    fn gae_single_step() {
        let out = compute_gae(&[1.0], &[0.0, 0.0], 0.95, 0.8).unwrap();
        assert_eq!(out.raw_advantages, vec![1.0]);
        assert_eq!(out.advantages, vec![1.0]);
        assert_eq!(out.returns, vec![1.0]);
    }

    #[test]
    fn gae_all_zero() {
        let out = compute_gae(&[0.0; 5], &[0.0; 6], 0.95, 0.8).unwrap();
        assert!(out.raw_advantages.iter().all(|a| *a == 0.0));
        assert!(out.advantages.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn gae_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let r: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..17).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = compute_gae(&r, &v, 0.95, 0.8).unwrap();
        for (a, b) in out.raw_advantages.iter().zip(brute_force_gae(&r, &v, 0.95, 0.8)) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(compute_gae(&r, &v[..16], 0.95, 0.8).is_err());
    }

    #[test]
    fn surrogate_clip_is_identity_inside_band() {
        for ratio in [0.81, 0.95, 1.0, 1.1, 1.19] {
            for adv in [-2.0, 0.5, 3.0] {
                assert_eq!(clipped_surrogate(ratio, adv, 0.2), ratio * adv);
            }
        }
        assert_eq!(clipped_surrogate(1.5, 1.0, 0.2), 1.2);
        assert_eq!(clipped_surrogate(0.5, -1.0, 0.2), -0.8);
    }

    #[test]
    fn critic_zero_and_linear_cases() {
        let zero = CriticParams::zeros(3, 4);
        assert_eq!(critic_forward(&zero, &LatentState(vec![1.0, 2.0, 3.0])).unwrap(), 0.0);
        // One hidden unit that passes x₀ + 2x₁ (positive), output weight 3, bias 0.5.
        let mut c = CriticParams::zeros(2, 1);
        c.hidden.weight = vec![1.0, 2.0];
        c.output.weight = vec![3.0];
        c.output.bias = vec![0.5];
        let s = LatentState(vec![0.6, 0.8]);
        assert!((critic_forward(&c, &s).unwrap() - (3.0 * (0.6 + 1.6) + 0.5)).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = CriticParams::init(3, 5, &mut rng);
        let states: Vec<_> = (0..4).map(|_| LatentState::standard_normal(3, &mut rng)).collect();
        let batch = critic_forward_batch(&c, &states).unwrap();
        for (s, v) in states.iter().zip(batch) {
            assert_eq!(critic_forward(&c, s).unwrap(), v);
        }
    }

    fn random_instance(seed: u64) -> (PolicyParams, Vec<LatentState>, Vec<usize>, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = PolicyParams::init(4, 6, &mut rng);
        let states: Vec<_> = (0..5).map(|_| LatentState::standard_normal(4, &mut rng)).collect();
        let mut actions = Vec::new();
        let mut old = Vec::new();
        for s in &states {
            let d = policy_forward(&policy, s).unwrap();
            let (a, lp) = sample_action(&d, &mut rng);
            actions.push(a);
            // Perturb so that ratios differ from 1 and some get clipped.
            old.push(lp + rng.random_range(-0.4..0.4));
        }
        let adv = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        (policy, states, actions, old, adv)
    }

    #[test]
    fn policy_gradient_matches_finite_differences() {
        for seed in 0..10 {
            let (policy, states, actions, old, adv) = random_instance(seed);
            let obj = policy_objective(&policy, &states, &actions, &old, &adv, 0.2, 0.05).unwrap();
            let report = check_gradient(&policy, &obj.grads, DEFAULT_STEP, |p| {
                policy_objective(p, &states, &actions, &old, &adv, 0.2, 0.05)
                    .unwrap()
                    .loss
            });
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn critic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let critic = CriticParams::init(4, 6, &mut rng);
        let states: Vec<_> = (0..6).map(|_| LatentState::standard_normal(4, &mut rng)).collect();
        let returns: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, g) = value_objective(&critic, &states, &returns, 0.5).unwrap();
        let report = check_gradient(&critic, &g, DEFAULT_STEP, |c| {
            value_objective(c, &states, &returns, 0.5).unwrap().0
        });
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    fn zero_adv_trajectory(seed: u64) -> (PolicyParams, CriticParams, Trajectory) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = PolicyParams::init(4, 6, &mut rng);
        let critic = CriticParams::zeros(4, 6);
        let states: Vec<_> = (0..6).map(|_| LatentState::standard_normal(4, &mut rng)).collect();
        let mut traj = Trajectory {
            rewards: vec![0.0; 6],
            values: vec![0.0; 7],
            ..Default::default()
        };
        for s in &states {
            let (a, lp) = sample_action(&policy_forward(&policy, s).unwrap(), &mut rng);
            traj.actions.push(a);
            traj.old_logprobs.push(lp);
        }
        traj.states = states;
        (policy, critic, traj)
    }

    #[test]
    fn zero_advantages_leave_policy_unchanged_without_entropy_bonus() {
        let (policy, critic, traj) = zero_adv_trajectory(3);
        let mut opt = PpoOptimizer::new(&policy, &critic);
        let (new_policy, _, stats) = ppo_update(&policy, &critic, &mut opt, &traj, &PpoConfig::default(), 0.0).unwrap();
        assert_eq!(new_policy, policy);
        assert_eq!(stats.kl_old_new, 0.0);
        let mut opt = PpoOptimizer::new(&policy, &critic);
        let (with_bonus, _, _) = ppo_update(&policy, &critic, &mut opt, &traj, &PpoConfig::default(), 0.5).unwrap();
        assert_ne!(with_bonus, policy);
    }

    #[test]
    fn update_rejects_malformed_trajectory() {
        let (policy, critic, mut traj) = zero_adv_trajectory(4);
        traj.values.pop();
        let mut opt = PpoOptimizer::new(&policy, &critic);
        assert!(ppo_update(&policy, &critic, &mut opt, &traj, &PpoConfig::default(), 0.0).is_err());
    }

    #[test]
    fn non_finite_reward_is_reported() {
        let (policy, critic, mut traj) = zero_adv_trajectory(5);
        traj.rewards[2] = f64::NAN;
        let mut opt = PpoOptimizer::new(&policy, &critic);
        let err = ppo_update(&policy, &critic, &mut opt, &traj, &PpoConfig::default(), 0.0).unwrap_err();
        assert!(err.is_numeric());
    }
}
