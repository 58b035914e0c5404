//! Curriculum schedules: augmented-data proportion, exploration coefficient
//! and forgery-region area over training epochs, plus the 15-region organ
//! pool and its Gaussian-weighted sampler.

use std::fmt;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CrdaError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    pub total_epochs: usize,
    pub beta_max: f64,
    pub steepness: f64,
    pub peak_phase: f64,
    pub area_full: f64,
    pub area_min: f64,
    /// Exponential decay rate of the target area; `None` means `2/τ`.
    pub region_decay: Option<f64>,
    pub region_sigma: f64,
    /// Holds `q = 1` after mid-training instead of following the sine back down.
    pub monotone_data_course: bool,
    /// Per-organ areas in [`Organ::ALL`] order.
    pub organ_areas: [f64; 4],
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            total_epochs: 30,
            beta_max: 0.01,
            steepness: 5.0,
            peak_phase: 0.3,
            area_full: 1.0,
            area_min: 0.3,
            region_decay: None,
            region_sigma: 0.1,
            monotone_data_course: false,
            organ_areas: [0.2, 0.2, 0.25, 0.35],
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs < 1 {
            return Err(CrdaError::out_of_range("total_epochs", "must be >= 1"));
        }
        if !(self.peak_phase > 0.0 && self.peak_phase < 1.0) {
            return Err(CrdaError::out_of_range(
                "peak_phase",
                format!("{} not in (0,1)", self.peak_phase),
            ));
        }
        if !(self.area_min < self.area_full) {
            return Err(CrdaError::out_of_range(
                "area_min",
                format!("{} must be below area_full {}", self.area_min, self.area_full),
            ));
        }
        if !(self.region_sigma > 0.0) {
            return Err(CrdaError::out_of_range("region_sigma", "must be > 0"));
        }
        if !(self.beta_max >= 0.0) {
            return Err(CrdaError::out_of_range("beta_max", "must be >= 0"));
        }
        if let Some(d) = self.region_decay {
            if !d.is_finite() || d < 0.0 {
                return Err(CrdaError::out_of_range("region_decay", "must be >= 0"));
            }
        }
        Ok(())
    }

    pub fn decay_rate(&self) -> f64 {
        self.region_decay.unwrap_or(2.0 / self.total_epochs as f64)
    }

    fn tau(&self) -> f64 {
        self.total_epochs as f64
    }

    fn check_epoch(&self, t: f64) -> Result<()> {
        if !(t >= 0.0 && t <= self.tau()) {
            return Err(CrdaError::out_of_range(
                "epoch",
                format!("t = {t} outside [0, {}]", self.total_epochs),
            ));
        }
        Ok(())
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Fraction of augmented samples in a training batch at epoch `t`.
pub fn data_proportion(t: f64, cfg: &CurriculumConfig) -> Result<f64> {
    cfg.check_epoch(t)?;
    let tau = cfg.tau();
    let t = if cfg.monotone_data_course { t.min(tau / 2.0) } else { t };
    let phase = std::f64::consts::PI * (t - tau / 4.0) / (tau / 2.0);
    Ok(0.5 + 0.5 * phase.sin().clamp(-1.0, 1.0))
}

/// Entropy-bonus coefficient; zero at `t = 0` by construction.
pub fn exploration_coef(t: f64, cfg: &CurriculumConfig) -> Result<f64> {
    cfg.check_epoch(t)?;
    let k = cfg.steepness;
    let mu = cfg.peak_phase;
    Ok(cfg.beta_max * (logistic(k * (t / cfg.tau() - mu)) - logistic(-k * mu)))
}

/// Unclamped target area `A_full·e^{−λt} + A_min`.
pub fn target_area_raw(t: f64, cfg: &CurriculumConfig) -> Result<f64> {
    cfg.check_epoch(t)?;
    Ok(cfg.area_full * (-cfg.decay_rate() * t).exp() + cfg.area_min)
}

/// Target area clamped to a valid fraction.
pub fn target_area(t: f64, cfg: &CurriculumConfig) -> Result<f64> {
    Ok(target_area_raw(t, cfg)?.clamp(0.0, 1.0))
}

/// One row of the schedule dump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleRow {
    pub t: f64,
    pub q: f64,
    pub beta: f64,
    pub area_raw: f64,
    pub area_clamped: f64,
}

pub fn schedule_row(t: f64, cfg: &CurriculumConfig) -> Result<ScheduleRow> {
    Ok(ScheduleRow {
        t,
        q: data_proportion(t, cfg)?,
        beta: exploration_coef(t, cfg)?,
        area_raw: target_area_raw(t, cfg)?,
        area_clamped: target_area(t, cfg)?,
    })
}

/// CSV with header `t,q,beta,area_raw,area_clamped`, one row per integer
/// epoch `0..=τ`, 9 decimal places.
pub fn schedule_csv(cfg: &CurriculumConfig) -> Result<String> {
    cfg.validate()?;
    let mut out = String::from("t,q,beta,area_raw,area_clamped\n");
    for t in 0..=cfg.total_epochs {
        let r = schedule_row(t as f64, cfg)?;
        writeln!(
            out,
            "{},{:.9},{:.9},{:.9},{:.9}",
            t, r.q, r.beta, r.area_raw, r.area_clamped
        )
        .expect("writing to a String cannot fail");
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Organ {
    LeftEye,
    RightEye,
    Nose,
    Mouth,
}

impl Organ {
    pub const ALL: [Organ; 4] = [Organ::LeftEye, Organ::RightEye, Organ::Nose, Organ::Mouth];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Organ::LeftEye => "left_eye",
            Organ::RightEye => "right_eye",
            Organ::Nose => "nose",
            Organ::Mouth => "mouth",
        }
    }
}

/// A nonempty set of organs, stored as a 4-bit mask in [`Organ::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OrganSet(u8);

impl OrganSet {
    pub const FULL: OrganSet = OrganSet(0b1111);

    pub fn from_mask(mask: u8) -> Result<Self> {
        if mask == 0 || mask > 0b1111 {
            return Err(CrdaError::Invalid(format!("organ mask {mask:#06b}")));
        }
        Ok(Self(mask))
    }

    pub fn from_organs(organs: &[Organ]) -> Result<Self> {
        Self::from_mask(organs.iter().fold(0u8, |m, o| m | (1 << o.index())))
    }

    pub fn mask(self) -> u8 {
        self.0
    }

    pub fn contains(self, organ: Organ) -> bool {
        self.0 & (1 << organ.index()) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn organs(self) -> impl Iterator<Item = Organ> {
        Organ::ALL.into_iter().filter(move |o| self.contains(*o))
    }
}

impl fmt::Display for OrganSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.organs().map(Organ::name).collect();
        write!(f, "{}", names.join("+"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub organs: OrganSet,
    pub area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionPool {
    regions: Vec<Region>,
}

const AREA_SUM_TOLERANCE: f64 = 1e-9;

/// Enumerates all 15 nonempty organ subsets with summed areas.
pub fn build_region_pool(organ_areas: [f64; 4], area_full: f64) -> Result<RegionPool> {
    if let Some(a) = organ_areas.iter().find(|a| !(**a > 0.0)) {
        return Err(CrdaError::out_of_range(
            "organ_areas",
            format!("area {a} must be positive"),
        ));
    }
    let total: f64 = organ_areas.iter().sum();
    if (total - area_full).abs() > AREA_SUM_TOLERANCE {
        return Err(CrdaError::out_of_range(
            "organ_areas",
            format!("areas sum to {total}, expected {area_full}"),
        ));
    }
    let regions = (1u8..16)
        .map(|mask| {
            let organs = OrganSet(mask);
            let area = organs.organs().map(|o| organ_areas[o.index()]).sum();
            Region { organs, area }
        })
        .collect();
    Ok(RegionPool { regions })
}

impl RegionPool {
    pub fn from_config(cfg: &CurriculumConfig) -> Result<Self> {
        build_region_pool(cfg.organ_areas, cfg.area_full)
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn full(&self) -> Region {
        *self
            .regions
            .iter()
            .find(|r| r.organs == OrganSet::FULL)
            .expect("pool always holds the full-face region")
    }

    pub fn probabilities(&self, target_area: f64, sigma: f64) -> Vec<f64> {
        let areas: Vec<f64> = self.regions.iter().map(|r| r.area).collect();
        gaussian_weights(&areas, target_area, sigma)
    }
}

/// Normalized `exp(−(aᵢ − target)²/(2σ²))` weights, computed in log space so
/// that tiny `σ` still yields a valid distribution.
pub fn gaussian_weights(areas: &[f64], target: f64, sigma: f64) -> Vec<f64> {
    let logw: Vec<f64> = areas
        .iter()
        .map(|a| -(a - target).powi(2) / (2.0 * sigma * sigma))
        .collect();
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Inverse-CDF draw from a discrete distribution.
pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `acc` slightly below 1; fall back to the last positive entry.
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

pub fn sample_region<R: Rng + ?Sized>(pool: &RegionPool, target_area: f64, sigma: f64, rng: &mut R) -> Region {
    let probs = pool.probabilities(target_area, sigma);
    pool.regions[sample_index(&probs, rng)]
}
