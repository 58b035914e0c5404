//! The training loop: per-batch detector updates under a frozen policy,
//! then one PPO update of the augmentation policy per epoch.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config;
use crate::detector::{BiasTerms, DetectorDims, DetectorParams, LossSpec};
use crate::environments::{
    environment_weights, new_queues, partition_batch, push_environments, sample_entropy, SampleQueues, NUM_ENVIRONMENTS,
};
use crate::error::{CrdaError, Result};
use crate::irm::{self, PenaltyWeighting};
use crate::nn::{sigmoid, AdamConfig, AdamState, ParamSet};
use crate::policy::{
    action_entropy, kl_divergence, policy_forward, sample_action, update_state, ActionDistribution, LatentState,
    PolicyParams, NUM_ACTIONS,
};
use crate::ppo::{critic_forward, ppo_update, CriticParams, PpoConfig, PpoOptimizer, PpoStats, Trajectory};
use crate::rewards::{
    adversarial_deception, lambda_schedule, roc_auc, total_reward, training_stability, RewardBreakdown,
    RewardComponents, RewardConfig, INITIAL_PREVIOUS_AUC,
};
use crate::schedules::{
    data_proportion, exploration_coef, sample_region, target_area, CurriculumConfig, OrganSet, RegionPool,
};
use crate::synthtask::{SyntheticSample, SyntheticTask, TaskConfig};

/// Loop sizes, ablation switches and network widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub seed: u64,
    pub no_rl: bool,
    pub no_irm: bool,
    pub no_curriculum: bool,
    pub validation_size: usize,
    pub shift_size: usize,
    /// Fixed real samples on which the deception reward is measured.
    pub probe_size: usize,
    pub ppo_updates_per_epoch: usize,
    pub detector_lr: f64,
    pub weight_decay: f64,
    pub detector_hidden: usize,
    pub latent_dim: usize,
    pub policy_hidden: usize,
    pub critic_hidden: usize,
    pub out_dir: String,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            batches_per_epoch: 50,
            seed: 0,
            no_rl: false,
            no_irm: false,
            no_curriculum: false,
            validation_size: 2000,
            shift_size: 2000,
            probe_size: 32,
            ppo_updates_per_epoch: 1,
            detector_lr: 1e-4,
            weight_decay: 5e-4,
            detector_hidden: 64,
            latent_dim: 32,
            policy_hidden: 64,
            critic_hidden: 64,
            out_dir: "runs/crda".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrmConfig {
    /// Weight `γ` of the bias loss in the detector objective.
    pub gamma: f64,
    /// Penalty scale `Ω`.
    pub omega: f64,
    pub weighting: PenaltyWeighting,
}

impl Default for IrmConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            omega: 1.0,
            weighting: PenaltyWeighting::Weighted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainConfig {
    pub engine: EngineConfig,
    /// `total_epochs` here is ignored; [`TrainConfig::curriculum`] takes it from `engine.epochs`.
    pub curriculum: CurriculumConfig,
    pub ppo: PpoConfig,
    pub task: TaskConfig,
    pub irm: IrmConfig,
    pub rewards: RewardConfig,
}

fn keyed(section: &str, err: CrdaError) -> CrdaError {
    match err {
        CrdaError::OutOfRange { what, detail } => CrdaError::Config {
            key: format!("{section}.{what}"),
            reason: detail,
        },
        other => other,
    }
}

fn config_err(key: &str, reason: impl Into<String>) -> CrdaError {
    CrdaError::Config {
        key: key.into(),
        reason: reason.into(),
    }
}

impl TrainConfig {
    pub fn curriculum(&self) -> CurriculumConfig {
        CurriculumConfig {
            total_epochs: self.engine.epochs,
            ..self.curriculum.clone()
        }
    }

    /// Checks every sub-config; errors name the offending `section.key`.
    pub fn validate(&self) -> Result<()> {
        let e = &self.engine;
        for (key, v) in [
            ("engine.epochs", e.epochs),
            ("engine.batch_size", e.batch_size),
            ("engine.batches_per_epoch", e.batches_per_epoch),
            ("engine.probe_size", e.probe_size),
            ("engine.ppo_updates_per_epoch", e.ppo_updates_per_epoch),
            ("engine.detector_hidden", e.detector_hidden),
            ("engine.latent_dim", e.latent_dim),
            ("engine.policy_hidden", e.policy_hidden),
            ("engine.critic_hidden", e.critic_hidden),
        ] {
            if v < 1 {
                return Err(config_err(key, "must be >= 1"));
            }
        }
        for (key, v) in [
            ("engine.validation_size", e.validation_size),
            ("engine.shift_size", e.shift_size),
        ] {
            if v < 2 || v % 2 != 0 {
                return Err(config_err(key, format!("{v} must be even and >= 2")));
            }
        }
        if !(e.detector_lr > 0.0 && e.detector_lr.is_finite()) {
            return Err(config_err("engine.detector_lr", "must be > 0"));
        }
        if !(e.weight_decay >= 0.0 && e.weight_decay.is_finite()) {
            return Err(config_err("engine.weight_decay", "must be >= 0"));
        }
        self.curriculum().validate().map_err(|x| keyed("curriculum", x))?;
        RegionPool::from_config(&self.curriculum()).map_err(|x| keyed("curriculum", x))?;
        self.ppo.validate().map_err(|x| keyed("ppo", x))?;
        self.task.validate().map_err(|x| keyed("task", x))?;
        self.rewards.validate().map_err(|x| keyed("rewards", x))?;
        if !(self.irm.gamma >= 0.0 && self.irm.gamma.is_finite()) {
            return Err(config_err("irm.gamma", "must be >= 0"));
        }
        if !(self.irm.omega >= 0.0 && self.irm.omega.is_finite()) {
            return Err(config_err("irm.omega", "must be >= 0"));
        }
        Ok(())
    }

    /// `γ` as used by the detector objective; zero under `no_irm`.
    pub fn effective_gamma(&self) -> f64 {
        if self.engine.no_irm {
            0.0
        } else {
            self.irm.gamma
        }
    }
}

/// Ablation presets 1..=5: all off, curriculum only, RL + curriculum,
/// invariance + curriculum, everything on.
pub fn apply_preset(engine: &mut EngineConfig, preset: u8) -> Result<()> {
    let (no_rl, no_irm, no_curriculum) = match preset {
        1 => (true, true, true),
        2 => (true, true, false),
        3 => (false, true, false),
        4 => (true, false, false),
        5 => (false, false, false),
        _ => return Err(config_err("preset", format!("{preset} not in 1..=5"))),
    };
    engine.no_rl = no_rl;
    engine.no_irm = no_irm;
    engine.no_curriculum = no_curriculum;
    Ok(())
}

/// Schedule values in force during one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochSchedule {
    pub q: f64,
    pub beta: f64,
    pub area: f64,
    pub lambdas: [f64; 4],
}

pub fn epoch_schedule(cfg: &TrainConfig, epoch: usize) -> Result<EpochSchedule> {
    let cur = cfg.curriculum();
    if cfg.engine.no_curriculum {
        return Ok(EpochSchedule {
            q: 0.5,
            beta: cur.beta_max / 2.0,
            area: cur.area_full,
            lambdas: cfg.rewards.lambda_early,
        });
    }
    let t = epoch as f64;
    Ok(EpochSchedule {
        q: data_proportion(t, &cur)?,
        beta: exploration_coef(t, &cur)?,
        area: target_area(t, &cur)?,
        lambdas: lambda_schedule(t, cur.total_epochs, &cfg.rewards)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardMeans {
    pub stability: f64,
    pub delta_auc: f64,
    pub adversarial: f64,
    pub kl_term: f64,
    pub total: f64,
}

impl RewardMeans {
    fn of(steps: &[RewardBreakdown]) -> Self {
        let n = steps.len() as f64;
        let mean = |f: fn(&RewardBreakdown) -> f64| steps.iter().map(f).sum::<f64>() / n;
        Self {
            stability: mean(|r| r.stability),
            delta_auc: mean(|r| r.delta_auc),
            adversarial: mean(|r| r.adversarial),
            kl_term: mean(|r| r.kl_term),
            total: mean(|r| r.total),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_ce: f64,
    pub bias_loss: f64,
    pub reward: RewardMeans,
    pub val_auc: f64,
    pub val_ce: f64,
    pub shift_auc: f64,
    pub q: f64,
    pub beta: f64,
    pub area: f64,
    /// Mean over the epoch's batches; all zero under `no_irm`.
    pub env_weights: [f64; NUM_ENVIRONMENTS],
    pub policy_entropy_mean: f64,
    pub action_counts: [usize; NUM_ACTIONS],
    pub ppo: Option<PpoStats>,
    /// Written to the timings file, not to the metrics stream.
    #[serde(skip)]
    pub wall_clock_ms: f64,
}

impl MetricsRecord {
    pub fn first_non_finite(&self) -> Option<&'static str> {
        let mut fields = vec![
            ("train_ce", self.train_ce),
            ("bias_loss", self.bias_loss),
            ("reward", self.reward.total),
            ("val_auc", self.val_auc),
            ("val_ce", self.val_ce),
            ("shift_auc", self.shift_auc),
            ("policy_entropy_mean", self.policy_entropy_mean),
        ];
        fields.extend(self.env_weights.iter().map(|w| ("env_weights", *w)));
        fields.into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }
}

/// `(AUC, mean CE)` of the detector's fake-probabilities on `dataset`.
pub fn evaluate(detector: &DetectorParams, dataset: &[SyntheticSample]) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(CrdaError::Empty("evaluation set"));
    }
    let logits = detector.logits(dataset)?;
    let labels: Vec<f64> = dataset.iter().map(SyntheticSample::label_f64).collect();
    let probs: Vec<f64> = logits.iter().map(|z| sigmoid(*z)).collect();
    let auc = roc_auc(&probs, &labels)?;
    let ce = irm::risk_from_logits(&logits, &labels);
    Ok((auc, ce))
}

/// Derived RNG streams; stream 0 drives training.
const STREAM_INIT: u64 = 1;
const STREAM_VALIDATION: u64 = 2;
const STREAM_SHIFT: u64 = 3;
const STREAM_PROBE: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub struct Trainer {
    cfg: TrainConfig,
    task: SyntheticTask,
    pool: RegionPool,
    validation: Vec<SyntheticSample>,
    shift: Vec<SyntheticSample>,
    probe: Vec<SyntheticSample>,
    detector: DetectorParams,
    detector_opt: AdamState<DetectorParams>,
    policy: PolicyParams,
    critic: CriticParams,
    ppo_opt: PpoOptimizer,
    queues: SampleQueues,
    rng: ChaCha8Rng,
    epoch: usize,
    prev_auc: f64,
    prev_dist: Option<ActionDistribution>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let task = SyntheticTask::new(cfg.task.clone())?;
        let pool = RegionPool::from_config(&cfg.curriculum())?;
        let e = &cfg.engine;
        let validation = task.make_validation_set(e.validation_size, &mut stream(e.seed, STREAM_VALIDATION))?;
        let shift = task.spurious_shift_set(e.shift_size, &mut stream(e.seed, STREAM_SHIFT))?;
        let probe = task.generate_real(e.probe_size, &mut stream(e.seed, STREAM_PROBE))?;

        let mut init = stream(e.seed, STREAM_INIT);
        let dims = DetectorDims {
            input_dim: task.input_dim(),
            hidden_dim: e.detector_hidden,
            latent_dim: e.latent_dim,
        };
        let detector = DetectorParams::init(dims, &mut init);
        let policy = PolicyParams::init(e.latent_dim, e.policy_hidden, &mut init);
        let critic = CriticParams::init(e.latent_dim, e.critic_hidden, &mut init);
        Ok(Self {
            detector_opt: AdamState::new(&detector),
            ppo_opt: PpoOptimizer::new(&policy, &critic),
            queues: new_queues(e.batch_size)?,
            rng: ChaCha8Rng::seed_from_u64(e.seed),
            epoch: 0,
            prev_auc: INITIAL_PREVIOUS_AUC,
            prev_dist: None,
            cfg,
            task,
            pool,
            validation,
            shift,
            probe,
            detector,
            policy,
            critic,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn task(&self) -> &SyntheticTask {
        &self.task
    }

    pub fn detector(&self) -> &DetectorParams {
        &self.detector
    }

    pub fn policy(&self) -> &PolicyParams {
        &self.policy
    }

    pub fn critic(&self) -> &CriticParams {
        &self.critic
    }

    pub fn queues(&self) -> &SampleQueues {
        &self.queues
    }

    pub fn validation_set(&self) -> &[SyntheticSample] {
        &self.validation
    }

    pub fn shift_set(&self) -> &[SyntheticSample] {
        &self.shift
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.engine.epochs
    }

    pub fn run_epoch(&mut self) -> Result<MetricsRecord> {
        if self.is_finished() {
            return Err(CrdaError::Invalid(format!(
                "training already finished after {} epochs",
                self.epoch
            )));
        }
        let t = self.epoch;
        let started = Instant::now();
        let mut record = self.epoch_body(t).map_err(|e| e.at_epoch(t))?;
        record.wall_clock_ms = started.elapsed().as_secs_f64() * 1e3;
        if let Some(field) = record.first_non_finite() {
            return Err(CrdaError::NonFinite {
                term: format!("metrics field {field}"),
                epoch: Some(t),
            });
        }
        self.epoch += 1;
        Ok(record)
    }

    fn epoch_body(&mut self, t: usize) -> Result<MetricsRecord> {
        let sched = epoch_schedule(&self.cfg, t)?;
        let e = self.cfg.engine.clone();
        let gamma = self.cfg.effective_gamma();
        let adam = AdamConfig {
            weight_decay: e.weight_decay,
            ..AdamConfig::with_lr(e.detector_lr)
        };
        let full = self.pool.full();
        let uniform = ActionDistribution::uniform(NUM_ACTIONS);

        let mut state = LatentState::standard_normal(e.latent_dim, &mut self.rng);
        let mut traj = Trajectory::default();
        let mut components = Vec::with_capacity(e.batches_per_epoch);
        let (mut ce_sum, mut bias_sum, mut entropy_sum) = (0.0, 0.0, 0.0);
        let mut weight_sum = [0.0; NUM_ENVIRONMENTS];
        let mut action_counts = [0usize; NUM_ACTIONS];

        for _ in 0..e.batches_per_epoch {
            let region = if e.no_curriculum {
                full
            } else {
                sample_region(&self.pool, sched.area, self.cfg.curriculum.region_sigma, &mut self.rng)
            };
            let dist = if e.no_rl {
                uniform.clone()
            } else {
                policy_forward(&self.policy, &state)?
            };
            let (action, logprob) = sample_action(&dist, &mut self.rng);
            action_counts[action] += 1;
            entropy_sum += action_entropy(&dist);
            let batch = self
                .task
                .make_train_batch(sched.q, &region, action, e.batch_size, &mut self.rng)?;
            let labels: Vec<f64> = batch.iter().map(SyntheticSample::label_f64).collect();

            // Reward terms that depend on the detector before this step.
            let probs: Vec<f64> = self.detector.logits(&batch)?.iter().map(|z| sigmoid(*z)).collect();
            let stability = training_stability(&probs, &labels)?;
            let adversarial = adversarial_deception(&self.detector, &dist, &self.probe, region.organs, &self.task)?;
            let kl_term = match &self.prev_dist {
                Some(prev) => kl_divergence(&dist, prev)?,
                None => 0.0,
            };

            let mut envs: Vec<Vec<SyntheticSample>> = Vec::new();
            let mut weights = Vec::new();
            if !e.no_irm {
                let entropies = batch
                    .iter()
                    .map(|s| sample_entropy(&self.policy, &self.detector, s))
                    .collect::<Result<Vec<_>>>()?;
                let partition = partition_batch(&entropies)?;
                push_environments(&mut self.queues, &partition, &batch)?;
                weights = environment_weights(&self.queues, &self.policy, &self.detector)?.0;
                envs = self.queues.iter().map(|q| q.iter().cloned().collect()).collect();
                for (acc, w) in weight_sum.iter_mut().zip(&weights) {
                    *acc += w;
                }
            }
            let env_refs: Vec<&[SyntheticSample]> = envs.iter().map(Vec::as_slice).collect();
            let bias = BiasTerms {
                environments: &env_refs,
                weights: &weights,
                omega: self.cfg.irm.omega,
                weighting: self.cfg.irm.weighting,
            };
            let spec = if e.no_irm {
                LossSpec::Ce(&batch)
            } else {
                LossSpec::Total {
                    batch: &batch,
                    bias,
                    gamma,
                }
            };

            let ce = LossSpec::Ce(&batch).value(&self.detector)?;
            if !ce.is_finite() {
                return Err(CrdaError::non_finite("cross-entropy loss"));
            }
            ce_sum += ce;
            if !e.no_irm {
                bias_sum += irm::bias_loss(&self.detector, &bias)?.bias_loss;
            }
            let grads = self.detector.backward(&spec)?;
            self.detector_opt.step(&mut self.detector, &grads, &adam);
            if let Some(name) = self.detector.first_non_finite() {
                return Err(CrdaError::non_finite(format!("detector update of {name}")));
            }

            traj.states.push(state.clone());
            traj.actions.push(action);
            traj.old_logprobs.push(logprob);
            traj.values.push(if e.no_rl {
                0.0
            } else {
                critic_forward(&self.critic, &state)?
            });
            components.push(RewardComponents {
                stability,
                delta_auc: 0.0,
                adversarial,
                kl_term,
            });
            self.prev_dist = Some(dist);
            state = update_state(&self.detector, &batch)?;
        }

        let (val_auc, val_ce) = evaluate(&self.detector, &self.validation)?;
        let delta = val_auc - self.prev_auc;
        self.prev_auc = val_auc;
        let rewards = components
            .into_iter()
            .map(|c| total_reward(RewardComponents { delta_auc: delta, ..c }, sched.lambdas))
            .collect::<Result<Vec<_>>>()?;
        traj.rewards = rewards.iter().map(|r| r.total).collect();
        // Each epoch is a finished episode: no bootstrap beyond its last step.
        traj.values.push(0.0);

        let mut ppo = None;
        if !e.no_rl {
            for _ in 0..e.ppo_updates_per_epoch {
                let (p, c, stats) = ppo_update(
                    &self.policy,
                    &self.critic,
                    &mut self.ppo_opt,
                    &traj,
                    &self.cfg.ppo,
                    sched.beta,
                )?;
                self.policy = p;
                self.critic = c;
                ppo = Some(stats);
            }
        }

        let (shift_auc, _) = evaluate(&self.detector, &self.shift)?;
        let n = e.batches_per_epoch as f64;
        let env_weights = if e.no_irm {
            [0.0; NUM_ENVIRONMENTS]
        } else {
            weight_sum.map(|w| w / n)
        };
        Ok(MetricsRecord {
            epoch: t,
            train_ce: ce_sum / n,
            bias_loss: bias_sum / n,
            reward: RewardMeans::of(&rewards),
            val_auc,
            val_ce,
            shift_auc,
            q: sched.q,
            beta: sched.beta,
            area: sched.area,
            env_weights,
            policy_entropy_mean: entropy_sum / n,
            action_counts,
            ppo,
            wall_clock_ms: 0.0,
        })
    }

    /// Complete training state after the last finished epoch.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.epoch, config::serialize(&self.cfg));
        let seed: String = self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        c.set_meta("rng_seed", seed);
        c.set_meta("rng_stream", self.rng.get_stream());
        c.set_meta("rng_word_pos", self.rng.get_word_pos());
        c.set_meta("prev_auc_bits", format!("{:016x}", self.prev_auc.to_bits()));
        c.set_meta("detector_adam_step", self.detector_opt.step);
        c.set_meta("policy_adam_step", self.ppo_opt.policy.step);
        c.set_meta("critic_adam_step", self.ppo_opt.critic.step);

        push_params(&mut c, "", &self.detector);
        push_params(&mut c, "adam.m.", &self.detector_opt.m);
        push_params(&mut c, "adam.v.", &self.detector_opt.v);
        push_params(&mut c, "", &self.policy);
        push_params(&mut c, "adam.m.", &self.ppo_opt.policy.m);
        push_params(&mut c, "adam.v.", &self.ppo_opt.policy.v);
        push_params(&mut c, "", &self.critic);
        push_params(&mut c, "adam.m.", &self.ppo_opt.critic.m);
        push_params(&mut c, "adam.v.", &self.ppo_opt.critic.v);
        c.push_section(
            "policy.prev_dist",
            self.prev_dist.as_ref().map_or(Vec::new(), |d| d.probs().to_vec()),
        );
        for (name, q) in crate::environments::ENV_NAMES.iter().zip(&self.queues) {
            let mut flat = Vec::new();
            for s in q.iter() {
                flat.push(s.label as f64);
                flat.push(s.op_used.map_or(-1.0, |o| o as f64));
                flat.push(s.region_used.map_or(0.0, |r| r.mask() as f64));
                flat.extend_from_slice(&s.features);
            }
            c.push_section(format!("queue.{name}"), flat);
        }
        c
    }

    /// Rebuilds a trainer from a checkpoint using its embedded config.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = config::parse(&ckpt.config)?;
        Self::restore(cfg, ckpt)
    }

    /// Rebuilds a trainer for `cfg` and overwrites its state from `ckpt`.
    /// Every tensor must match the shapes implied by `cfg`.
    pub fn restore(cfg: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        if ckpt.epoch > t.cfg.engine.epochs {
            return Err(CrdaError::Invalid(format!(
                "checkpoint epoch {} exceeds configured {} epochs",
                ckpt.epoch, t.cfg.engine.epochs
            )));
        }
        load_params(ckpt, "", &mut t.detector)?;
        load_params(ckpt, "adam.m.", &mut t.detector_opt.m)?;
        load_params(ckpt, "adam.v.", &mut t.detector_opt.v)?;
        load_params(ckpt, "", &mut t.policy)?;
        load_params(ckpt, "adam.m.", &mut t.ppo_opt.policy.m)?;
        load_params(ckpt, "adam.v.", &mut t.ppo_opt.policy.v)?;
        load_params(ckpt, "", &mut t.critic)?;
        load_params(ckpt, "adam.m.", &mut t.ppo_opt.critic.m)?;
        load_params(ckpt, "adam.v.", &mut t.ppo_opt.critic.v)?;
        t.detector_opt.step = ckpt.meta_parse("detector_adam_step")?;
        t.ppo_opt.policy.step = ckpt.meta_parse("policy_adam_step")?;
        t.ppo_opt.critic.step = ckpt.meta_parse("critic_adam_step")?;

        let prev = ckpt.section("policy.prev_dist").unwrap_or(&[]);
        t.prev_dist = match prev.len() {
            0 => None,
            NUM_ACTIONS => Some(ActionDistribution::new(prev.to_vec())?),
            n => {
                return Err(CrdaError::CheckpointShape {
                    name: "policy.prev_dist".into(),
                    expected: NUM_ACTIONS,
                    found: n,
                })
            }
        };

        let d = t.task.input_dim();
        let width = 3 + d;
        let mut queues = new_queues(t.cfg.engine.batch_size)?;
        for (name, q) in crate::environments::ENV_NAMES.iter().zip(queues.iter_mut()) {
            let key = format!("queue.{name}");
            let flat = ckpt.section(&key).unwrap_or(&[]);
            let count = flat.len() / width;
            if !flat.len().is_multiple_of(width) || count > q.capacity() {
                return Err(CrdaError::CheckpointShape {
                    name: key,
                    expected: width * count.min(q.capacity()),
                    found: flat.len(),
                });
            }
            for row in flat.chunks_exact(width) {
                let region_mask = row[2] as u8;
                q.push(SyntheticSample {
                    label: row[0] as u8,
                    op_used: (row[1] >= 0.0).then_some(row[1] as usize),
                    region_used: if region_mask == 0 {
                        None
                    } else {
                        Some(OrganSet::from_mask(region_mask)?)
                    },
                    features: row[3..].to_vec(),
                });
            }
        }
        t.queues = queues;

        let seed_hex = ckpt.meta("rng_seed")?;
        let mut seed = [0u8; 32];
        if seed_hex.len() != 64 {
            return Err(CrdaError::Invalid("checkpoint rng seed must be 64 hex digits".into()));
        }
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16)
                .map_err(|_| CrdaError::Invalid("checkpoint rng seed is not hex".into()))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(ckpt.meta_parse("rng_stream")?);
        rng.set_word_pos(ckpt.meta_parse("rng_word_pos")?);
        t.rng = rng;
        let bits = u64::from_str_radix(ckpt.meta("prev_auc_bits")?, 16)
            .map_err(|_| CrdaError::Invalid("checkpoint prev_auc_bits is not hex".into()))?;
        t.prev_auc = f64::from_bits(bits);
        t.epoch = ckpt.epoch;
        Ok(t)
    }
}

fn push_params<P: ParamSet>(c: &mut Checkpoint, prefix: &str, params: &P) {
    for (name, data) in params.tensors() {
        c.push_section(format!("{prefix}{name}"), data.to_vec());
    }
}

fn load_params<P: ParamSet>(c: &Checkpoint, prefix: &str, params: &mut P) -> Result<()> {
    for (name, data) in params.tensors_mut() {
        data.copy_from_slice(c.expect_section(&format!("{prefix}{name}"), data.len())?);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub epochs: usize,
    pub seed: u64,
    pub no_rl: bool,
    pub no_irm: bool,
    pub no_curriculum: bool,
    pub final_val_auc: f64,
    pub final_val_ce: f64,
    pub final_shift_auc: f64,
    pub best_val_auc: f64,
    pub final_train_ce: f64,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub records: Vec<MetricsRecord>,
    pub summary: Summary,
    pub metrics_path: Option<PathBuf>,
    pub summary_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const CHECKPOINT_FILE: &str = "final.crda";
pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config";

pub fn metrics_line(record: &MetricsRecord) -> Result<String> {
    Ok(serde_json::to_string(record)?)
}

fn summarize(cfg: &TrainConfig, records: &[MetricsRecord]) -> Result<Summary> {
    let last = records.last().ok_or(CrdaError::Empty("metrics records"))?;
    Ok(Summary {
        epochs: records.len(),
        seed: cfg.engine.seed,
        no_rl: cfg.engine.no_rl,
        no_irm: cfg.engine.no_irm,
        no_curriculum: cfg.engine.no_curriculum,
        final_val_auc: last.val_auc,
        final_val_ce: last.val_ce,
        final_shift_auc: last.shift_auc,
        best_val_auc: records.iter().map(|r| r.val_auc).fold(f64::NEG_INFINITY, f64::max),
        final_train_ce: last.train_ce,
    })
}

/// Drives `trainer` to completion. With `out_dir`, writes the effective
/// config, one metrics line per epoch, a timings file, `summary.json`
/// and a final checkpoint. Metrics lines of earlier epochs are not
/// rewritten when resuming; the file is appended to.
pub fn run_to_completion(trainer: &mut Trainer, out_dir: Option<&Path>) -> Result<RunReport> {
    let open = |dir: &Path, name: &str, append: bool| -> Result<fs::File> {
        let path = dir.join(name);
        fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| CrdaError::io(path, e))
    };
    let resuming = trainer.epoch() > 0;
    let mut files = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| CrdaError::io(dir, e))?;
            let cfg_path = dir.join(EFFECTIVE_CONFIG_FILE);
            fs::write(&cfg_path, config::serialize(trainer.config())).map_err(|e| CrdaError::io(cfg_path, e))?;
            Some((open(dir, METRICS_FILE, resuming)?, open(dir, TIMINGS_FILE, resuming)?))
        }
        None => None,
    };

    let mut records = Vec::new();
    while !trainer.is_finished() {
        let record = trainer.run_epoch()?;
        if let (Some((metrics, timings)), Some(dir)) = (files.as_mut(), out_dir) {
            writeln!(metrics, "{}", metrics_line(&record)?).map_err(|e| CrdaError::io(dir.join(METRICS_FILE), e))?;
            writeln!(
                timings,
                "{{\"epoch\":{},\"wall_clock_ms\":{}}}",
                record.epoch, record.wall_clock_ms
            )
            .map_err(|e| CrdaError::io(dir.join(TIMINGS_FILE), e))?;
        }
        records.push(record);
    }
    let summary = summarize(trainer.config(), &records)?;
    let mut report = RunReport {
        records,
        summary,
        metrics_path: None,
        summary_path: None,
        checkpoint_path: None,
    };
    if let Some(dir) = out_dir {
        let summary_path = dir.join(SUMMARY_FILE);
        let text = serde_json::to_string_pretty(&report.summary)?;
        fs::write(&summary_path, text + "\n").map_err(|e| CrdaError::io(&summary_path, e))?;
        let ckpt_path = dir.join(CHECKPOINT_FILE);
        trainer.checkpoint().save(&ckpt_path)?;
        report.metrics_path = Some(dir.join(METRICS_FILE));
        report.summary_path = Some(summary_path);
        report.checkpoint_path = Some(ckpt_path);
    }
    Ok(report)
}

pub fn run_training(cfg: TrainConfig, out_dir: Option<&Path>) -> Result<RunReport> {
    let mut trainer = Trainer::new(cfg)?;
    run_to_completion(&mut trainer, out_dir)
}
