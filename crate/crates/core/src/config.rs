//! Sectioned `key = value` config files.
//!
//! ```text
//! # comment
//! [engine]
//! epochs = 30
//! [ppo]
//! clip = 0.2
//! ```
//!
//! Sections: `engine`, `curriculum`, `ppo`, `task`, `irm`, `rewards`.
//! Missing keys take their defaults; unknown sections or keys, duplicate
//! keys, malformed values and out-of-range values are errors naming the
//! offending `section.key`. [`serialize`] writes every key, and its output
//! parses back to an equal config.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::engine::TrainConfig;
use crate::error::{CrdaError, Result};
use crate::irm::PenaltyWeighting;

pub const SECTIONS: [&str; 6] = ["engine", "curriculum", "ppo", "task", "irm", "rewards"];

fn err(key: &str, reason: impl Into<String>) -> CrdaError {
    CrdaError::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn int<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| err(key, format!("expected a non-negative integer, got `{v}`")))
}

fn real(key: &str, v: &str) -> Result<f64> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(err(key, format!("expected a finite number, got `{v}`"))),
    }
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(err(key, format!("expected true or false, got `{v}`"))),
    }
}

fn list<const N: usize>(key: &str, v: &str) -> Result<[f64; N]> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(err(key, format!("expected {N} comma-separated numbers, got `{v}`")));
    }
    let mut out = [0.0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = real(key, p)?;
    }
    Ok(out)
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(f64::to_string).collect::<Vec<_>>().join(", ")
}

/// Sets one `section.key` from its textual value, without range checks.
pub fn set_key(cfg: &mut TrainConfig, key: &str, v: &str) -> Result<()> {
    let (e, c, p, t, i, r) = (
        &mut cfg.engine,
        &mut cfg.curriculum,
        &mut cfg.ppo,
        &mut cfg.task,
        &mut cfg.irm,
        &mut cfg.rewards,
    );
    match key {
        "engine.epochs" => e.epochs = int(key, v)?,
        "engine.batch_size" => e.batch_size = int(key, v)?,
        "engine.batches_per_epoch" => e.batches_per_epoch = int(key, v)?,
        "engine.seed" => e.seed = int(key, v)?,
        "engine.no_rl" => e.no_rl = boolean(key, v)?,
        "engine.no_irm" => e.no_irm = boolean(key, v)?,
        "engine.no_curriculum" => e.no_curriculum = boolean(key, v)?,
        "engine.validation_size" => e.validation_size = int(key, v)?,
        "engine.shift_size" => e.shift_size = int(key, v)?,
        "engine.probe_size" => e.probe_size = int(key, v)?,
        "engine.ppo_updates_per_epoch" => e.ppo_updates_per_epoch = int(key, v)?,
        "engine.detector_lr" => e.detector_lr = real(key, v)?,
        "engine.weight_decay" => e.weight_decay = real(key, v)?,
        "engine.detector_hidden" => e.detector_hidden = int(key, v)?,
        "engine.latent_dim" => e.latent_dim = int(key, v)?,
        "engine.policy_hidden" => e.policy_hidden = int(key, v)?,
        "engine.critic_hidden" => e.critic_hidden = int(key, v)?,
        "engine.out_dir" => {
            if v.is_empty() {
                return Err(err(key, "must not be empty"));
            }
            e.out_dir = v.to_string()
        }
        "curriculum.beta_max" => c.beta_max = real(key, v)?,
        "curriculum.steepness" => c.steepness = real(key, v)?,
        "curriculum.peak_phase" => c.peak_phase = real(key, v)?,
        "curriculum.area_full" => c.area_full = real(key, v)?,
        "curriculum.area_min" => c.area_min = real(key, v)?,
        "curriculum.region_decay" => c.region_decay = if v == "auto" { None } else { Some(real(key, v)?) },
        "curriculum.region_sigma" => c.region_sigma = real(key, v)?,
        "curriculum.monotone_data_course" => c.monotone_data_course = boolean(key, v)?,
        "curriculum.organ_areas" => c.organ_areas = list(key, v)?,
        "ppo.clip" => p.clip = real(key, v)?,
        "ppo.update_epochs" => p.update_epochs = int(key, v)?,
        "ppo.lr" => p.lr = real(key, v)?,
        "ppo.gae_lambda" => p.gae_lambda = real(key, v)?,
        "ppo.discount" => p.discount = real(key, v)?,
        "ppo.max_grad_norm" => p.max_grad_norm = real(key, v)?,
        "ppo.value_coef" => p.value_coef = real(key, v)?,
        "task.organ_block_dim" => t.organ_block_dim = int(key, v)?,
        "task.spurious_dim" => t.spurious_dim = int(key, v)?,
        "task.noise_std" => t.noise_std = real(key, v)?,
        "task.causal_strength" => t.causal_strength = real(key, v)?,
        "task.spurious_strength" => t.spurious_strength = real(key, v)?,
        "irm.gamma" => i.gamma = real(key, v)?,
        "irm.omega" => i.omega = real(key, v)?,
        "irm.weighting" => {
            i.weighting = PenaltyWeighting::parse(v)
                .ok_or_else(|| err(key, format!("expected weighted or unweighted, got `{v}`")))?
        }
        "rewards.lambda_early" => r.lambda_early = list(key, v)?,
        "rewards.lambda_mid" => r.lambda_mid = list(key, v)?,
        "rewards.lambda_late" => r.lambda_late = list(key, v)?,
        "rewards.mid_start" => r.mid_start = real(key, v)?,
        "rewards.late_start" => r.late_start = real(key, v)?,
        _ => return Err(err(key, "unknown key")),
    }
    Ok(())
}

/// Every key of every section with its current textual value.
pub fn entries(cfg: &TrainConfig) -> Vec<(&'static str, Vec<(&'static str, String)>)> {
    let (e, c, p, t, i, r) = (
        &cfg.engine,
        &cfg.curriculum,
        &cfg.ppo,
        &cfg.task,
        &cfg.irm,
        &cfg.rewards,
    );
    vec![
        (
            "engine",
            vec![
                ("epochs", e.epochs.to_string()),
                ("batch_size", e.batch_size.to_string()),
                ("batches_per_epoch", e.batches_per_epoch.to_string()),
                ("seed", e.seed.to_string()),
                ("no_rl", e.no_rl.to_string()),
                ("no_irm", e.no_irm.to_string()),
                ("no_curriculum", e.no_curriculum.to_string()),
                ("validation_size", e.validation_size.to_string()),
                ("shift_size", e.shift_size.to_string()),
                ("probe_size", e.probe_size.to_string()),
                ("ppo_updates_per_epoch", e.ppo_updates_per_epoch.to_string()),
                ("detector_lr", e.detector_lr.to_string()),
                ("weight_decay", e.weight_decay.to_string()),
                ("detector_hidden", e.detector_hidden.to_string()),
                ("latent_dim", e.latent_dim.to_string()),
                ("policy_hidden", e.policy_hidden.to_string()),
                ("critic_hidden", e.critic_hidden.to_string()),
                ("out_dir", e.out_dir.clone()),
            ],
        ),
        (
            "curriculum",
            vec![
                ("beta_max", c.beta_max.to_string()),
                ("steepness", c.steepness.to_string()),
                ("peak_phase", c.peak_phase.to_string()),
                ("area_full", c.area_full.to_string()),
                ("area_min", c.area_min.to_string()),
                ("region_decay", c.region_decay.map_or("auto".into(), |d| d.to_string())),
                ("region_sigma", c.region_sigma.to_string()),
                ("monotone_data_course", c.monotone_data_course.to_string()),
                ("organ_areas", join(&c.organ_areas)),
            ],
        ),
        (
            "ppo",
            vec![
                ("clip", p.clip.to_string()),
                ("update_epochs", p.update_epochs.to_string()),
                ("lr", p.lr.to_string()),
                ("gae_lambda", p.gae_lambda.to_string()),
                ("discount", p.discount.to_string()),
                ("max_grad_norm", p.max_grad_norm.to_string()),
                ("value_coef", p.value_coef.to_string()),
            ],
        ),
        (
            "task",
            vec![
                ("organ_block_dim", t.organ_block_dim.to_string()),
                ("spurious_dim", t.spurious_dim.to_string()),
                ("noise_std", t.noise_std.to_string()),
                ("causal_strength", t.causal_strength.to_string()),
                ("spurious_strength", t.spurious_strength.to_string()),
            ],
        ),
        (
            "irm",
            vec![
                ("gamma", i.gamma.to_string()),
                ("omega", i.omega.to_string()),
                ("weighting", i.weighting.as_str().to_string()),
            ],
        ),
        (
            "rewards",
            vec![
                ("lambda_early", join(&r.lambda_early)),
                ("lambda_mid", join(&r.lambda_mid)),
                ("lambda_late", join(&r.lambda_late)),
                ("mid_start", r.mid_start.to_string()),
                ("late_start", r.late_start.to_string()),
            ],
        ),
    ]
}

pub fn serialize(cfg: &TrainConfig) -> String {
    let mut out = String::new();
    for (i, (section, kvs)) in entries(cfg).into_iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        writeln!(out, "[{section}]").unwrap();
        for (k, v) in kvs {
            writeln!(out, "{k} = {v}").unwrap();
        }
    }
    out
}

/// Applies file text onto defaults without validating ranges.
fn apply_text(cfg: &mut TrainConfig, text: &str) -> Result<()> {
    let mut section: Option<&str> = None;
    let mut seen = std::collections::HashSet::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            if !SECTIONS.contains(&name) {
                return Err(err(name, format!("unknown section on line {}", n + 1)));
            }
            section = Some(SECTIONS[SECTIONS.iter().position(|s| *s == name).unwrap()]);
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(line, format!("line {} is not `key = value`", n + 1)))?;
        let key = match section {
            Some(s) => format!("{s}.{}", k.trim()),
            None => return Err(err(k.trim(), format!("key outside any section on line {}", n + 1))),
        };
        if !seen.insert(key.clone()) {
            return Err(err(&key, "duplicate key"));
        }
        set_key(cfg, &key, v.trim())?;
    }
    Ok(())
}

/// Parses config text on top of defaults and validates the result.
pub fn parse(text: &str) -> Result<TrainConfig> {
    parse_with_overrides(text, &[])
}

/// File values, then `section.key=value` overrides, then validation.
pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    apply_text(&mut cfg, text)?;
    for o in overrides {
        apply_override(&mut cfg, o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Applies one `section.key=value` override without validating ranges.
pub fn apply_override(cfg: &mut TrainConfig, assignment: &str) -> Result<()> {
    let (k, v) = assignment
        .split_once('=')
        .ok_or_else(|| err(assignment, "override must look like section.key=value"))?;
    set_key(cfg, k.trim(), v.trim())
}
