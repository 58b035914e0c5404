//! Synthetic real/fake detection task with explicit causal and spurious
//! feature blocks.
//!
//! Layout of a feature vector (defaults in brackets):
//!
//! ```text
//! [ left_eye (4) | right_eye (4) | nose (4) | mouth (4) | spurious (7) ]
//! ```
//!
//! Real samples are isotropic Gaussian noise. Every augmentation operator
//! adds the same causal artifact `+c` to each organ block inside the chosen
//! region, and an operator-specific signature `s·eⱼ` to the spurious block.
//! The causal shift is the forgery footprint shared by all operators; the
//! signature is a shortcut tied to the operator that produced the fake.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CrdaError, Result};
use crate::schedules::{Organ, OrganSet, Region};

pub const NUM_OPS: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub organ_block_dim: usize,
    pub spurious_dim: usize,
    pub noise_std: f64,
    pub causal_strength: f64,
    pub spurious_strength: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            organ_block_dim: 4,
            spurious_dim: 7,
            noise_std: 0.5,
            causal_strength: 1.0,
            spurious_strength: 2.0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.organ_block_dim < 1 {
            return Err(CrdaError::out_of_range("organ_block_dim", "must be >= 1"));
        }
        if self.spurious_dim < NUM_OPS {
            return Err(CrdaError::out_of_range(
                "spurious_dim",
                format!(
                    "{} < {NUM_OPS}: signatures need one axis per operator",
                    self.spurious_dim
                ),
            ));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(CrdaError::out_of_range("noise_std", "must be > 0"));
        }
        if !self.causal_strength.is_finite() {
            return Err(CrdaError::out_of_range("causal_strength", "must be finite"));
        }
        if !self.spurious_strength.is_finite() {
            return Err(CrdaError::out_of_range("spurious_strength", "must be finite"));
        }
        Ok(())
    }

    pub fn causal_dim(&self) -> usize {
        4 * self.organ_block_dim
    }

    pub fn input_dim(&self) -> usize {
        self.causal_dim() + self.spurious_dim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub features: Vec<f64>,
    /// 0 = real, 1 = fake.
    pub label: u8,
    pub op_used: Option<usize>,
    pub region_used: Option<OrganSet>,
}

impl SyntheticSample {
    /// A sample with no augmentation provenance.
    pub fn raw(features: Vec<f64>, label: u8) -> Self {
        Self {
            features,
            label,
            op_used: None,
            region_used: None,
        }
    }

    pub fn label_f64(&self) -> f64 {
        f64::from(self.label)
    }

    pub fn is_fake(&self) -> bool {
        self.label == 1
    }
}

/// A validated task with its fixed operator signatures.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    cfg: TaskConfig,
    normal: Normal<f64>,
}

impl SyntheticTask {
    pub fn new(cfg: TaskConfig) -> Result<Self> {
        cfg.validate()?;
        let normal =
            Normal::new(0.0, cfg.noise_std).map_err(|e| CrdaError::out_of_range("noise_std", e.to_string()))?;
        Ok(Self { cfg, normal })
    }

    pub fn config(&self) -> &TaskConfig {
        &self.cfg
    }

    pub fn input_dim(&self) -> usize {
        self.cfg.input_dim()
    }

    /// Signature of operator `op`: the `op`-th axis of the spurious block.
    pub fn signature(&self, op: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.cfg.spurious_dim];
        v[op] = 1.0;
        v
    }

    pub fn organ_block(&self, organ: Organ) -> std::ops::Range<usize> {
        let b = self.cfg.organ_block_dim;
        organ.index() * b..(organ.index() + 1) * b
    }

    pub fn causal_block(&self) -> std::ops::Range<usize> {
        0..self.cfg.causal_dim()
    }

    pub fn spurious_block(&self) -> std::ops::Range<usize> {
        self.cfg.causal_dim()..self.cfg.input_dim()
    }

    fn noise_vector<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.input_dim()).map(|_| self.normal.sample(rng)).collect()
    }

    pub fn generate_real<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<SyntheticSample>> {
        if n == 0 {
            return Err(CrdaError::Empty("generate_real count"));
        }
        Ok((0..n)
            .map(|_| SyntheticSample::raw(self.noise_vector(rng), 0))
            .collect())
    }

    fn add_signature(&self, features: &mut [f64], op: usize, scale: f64) {
        let start = self.spurious_block().start;
        let s = self.cfg.spurious_strength * scale;
        for (k, v) in self.signature(op).into_iter().enumerate() {
            features[start + k] += s * v;
        }
    }

    pub fn apply_augmentation(&self, sample: &SyntheticSample, op: usize, region: OrganSet) -> Result<SyntheticSample> {
        if sample.is_fake() {
            return Err(CrdaError::Invalid("cannot augment an already-fake sample".into()));
        }
        if op >= NUM_OPS {
            return Err(CrdaError::out_of_range("op_index", format!("{op} >= {NUM_OPS}")));
        }
        if sample.features.len() != self.input_dim() {
            return Err(CrdaError::ShapeMismatch {
                context: "augmentation input",
                expected: self.input_dim(),
                actual: sample.features.len(),
            });
        }
        let mut features = sample.features.clone();
        for organ in region.organs() {
            for k in self.organ_block(organ) {
                features[k] += self.cfg.causal_strength;
            }
        }
        self.add_signature(&mut features, op, 1.0);
        Ok(SyntheticSample {
            features,
            label: 1,
            op_used: Some(op),
            region_used: Some(region),
        })
    }

    /// A shuffled batch with `round(q·batch_size)` fakes made by `op` on `region`.
    pub fn make_train_batch<R: Rng + ?Sized>(
        &self,
        q: f64,
        region: &Region,
        op: usize,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<SyntheticSample>> {
        if batch_size < 1 {
            return Err(CrdaError::out_of_range("batch_size", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&q) {
            return Err(CrdaError::out_of_range("q", format!("{q} not in [0,1]")));
        }
        let n_fake = (q * batch_size as f64).round() as usize;
        let mut batch = self.generate_real(batch_size, rng)?;
        for s in batch.iter_mut().take(n_fake) {
            *s = self.apply_augmentation(s, op, region.organs)?;
        }
        batch.shuffle(rng);
        Ok(batch)
    }

    /// `n/2` reals followed by `n/2` full-face fakes with operators assigned
    /// round-robin.
    pub fn make_validation_set<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<SyntheticSample>> {
        if n == 0 || !n.is_multiple_of(2) {
            return Err(CrdaError::Invalid(format!(
                "validation size {n} must be positive and even"
            )));
        }
        let half = n / 2;
        let mut out = self.generate_real(half, rng)?;
        let sources = self.generate_real(half, rng)?;
        for (i, s) in sources.iter().enumerate() {
            out.push(self.apply_augmentation(s, i % NUM_OPS, OrganSet::FULL)?);
        }
        Ok(out)
    }

    /// Rewrites the spurious block of a labeled set so it carries no label
    /// information: each fake's signature is swapped for a uniformly random
    /// other operator's, and each real gains a uniformly random signature.
    /// Causal blocks are untouched.
    pub fn spurious_shift_of<R: Rng + ?Sized>(
        &self,
        set: &[SyntheticSample],
        rng: &mut R,
    ) -> Result<Vec<SyntheticSample>> {
        set.iter()
            .map(|s| {
                let mut out = s.clone();
                match s.op_used {
                    Some(op) if s.is_fake() => {
                        let other = (op + 1 + rng.random_range(0..NUM_OPS - 1)) % NUM_OPS;
                        self.add_signature(&mut out.features, op, -1.0);
                        self.add_signature(&mut out.features, other, 1.0);
                    }
                    _ if s.is_fake() => {
                        return Err(CrdaError::Invalid("fake sample without operator".into()));
                    }
                    _ => {
                        let decoy = rng.random_range(0..NUM_OPS);
                        self.add_signature(&mut out.features, decoy, 1.0);
                    }
                }
                Ok(out)
            })
            .collect()
    }

    pub fn spurious_shift_set<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<SyntheticSample>> {
        let base = self.make_validation_set(n, rng)?;
        self.spurious_shift_of(&base, rng)
    }

    /// Sum of the causal block; the score of an oracle that ignores shortcuts.
    pub fn causal_score(&self, sample: &SyntheticSample) -> f64 {
        sample.features[self.causal_block()].iter().sum()
    }

    /// Sum of the spurious block; a pure-shortcut score.
    pub fn spurious_score(&self, sample: &SyntheticSample) -> f64 {
        sample.features[self.spurious_block()].iter().sum()
    }
}

/// CSV export: header `label,op,f0,...`; `op` is empty for reals.
pub fn samples_to_csv(samples: &[SyntheticSample]) -> String {
    let dim = samples.first().map_or(0, |s| s.features.len());
    let mut out = String::from("label,op");
    for k in 0..dim {
        write!(out, ",f{k}").unwrap();
    }
    out.push('\n');
    for s in samples {
        write!(out, "{},", s.label).unwrap();
        if let Some(op) = s.op_used {
            write!(out, "{op}").unwrap();
        }
        for v in &s.features {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rewards::roc_auc;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn task() -> SyntheticTask {
        SyntheticTask::new(TaskConfig::default()).unwrap()
    }

    fn nose_only() -> OrganSet {
        OrganSet::from_organs(&[Organ::Nose]).unwrap()
    }

    #[test]
    fn generate_real_rejects_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(task().generate_real(0, &mut rng).is_err());
    }

    #[test]
    fn generate_real_is_centered() {
        let t = task();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let xs = t.generate_real(n, &mut rng).unwrap();
        let se = 0.5 / (n as f64).sqrt();
        for d in 0..t.input_dim() {
            let mean = xs.iter().map(|s| s.features[d]).sum::<f64>() / n as f64;
            assert!(mean.abs() < 3.0 * se + 1e-3, "dim {d}: {mean}");
        }
        assert!(xs.iter().all(|s| s.label == 0));
    }

    #[test]
    fn generate_real_is_seeded() {
        let t = task();
        let a = t.generate_real(20, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = t.generate_real(20, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_face_augmentation_shifts_every_causal_dim() {
        let t = task();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = &t.generate_real(1, &mut rng).unwrap()[0];
        let y = t.apply_augmentation(x, 0, OrganSet::FULL).unwrap();
        for k in t.causal_block() {
            assert!((y.features[k] - x.features[k] - 1.0).abs() < 1e-15);
        }
        let sb = t.spurious_block();
        for (j, k) in sb.enumerate() {
            let expected = if j == 0 { 2.0 } else { 0.0 };
            assert!((y.features[k] - x.features[k] - expected).abs() < 1e-15);
        }
        assert_eq!(y.label, 1);
        assert_eq!(y.op_used, Some(0));
    }

    #[test]
    fn nose_region_shifts_only_nose_block() {
        let t = task();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = &t.generate_real(1, &mut rng).unwrap()[0];
        let y = t.apply_augmentation(x, 4, nose_only()).unwrap();
        let nose = t.organ_block(Organ::Nose);
        for k in t.causal_block() {
            let d = y.features[k] - x.features[k];
            if nose.contains(&k) {
                assert!((d - 1.0).abs() < 1e-15);
            } else {
                assert_eq!(d, 0.0);
            }
        }
    }

    #[test]
    fn ops_differ_only_in_spurious_block() {
        let t = task();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = &t.generate_real(1, &mut rng).unwrap()[0];
        let region = OrganSet::from_organs(&[Organ::LeftEye, Organ::Mouth]).unwrap();
        let outs: Vec<_> = (0..NUM_OPS)
            .map(|j| t.apply_augmentation(x, j, region).unwrap())
            .collect();
        for o in &outs[1..] {
            assert_eq!(o.features[t.causal_block()], outs[0].features[t.causal_block()]);
            assert_ne!(o.features[t.spurious_block()], outs[0].features[t.spurious_block()]);
        }
    }

    #[test]
    fn cannot_augment_fake() {
        let t = task();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = &t.generate_real(1, &mut rng).unwrap()[0];
        let y = t.apply_augmentation(x, 1, OrganSet::FULL).unwrap();
        assert!(t.apply_augmentation(&y, 2, OrganSet::FULL).is_err());
        assert!(t.apply_augmentation(x, 7, OrganSet::FULL).is_err());
    }

    #[test]
    fn signatures_are_orthonormal() {
        let t = task();
        for i in 0..NUM_OPS {
            for j in 0..NUM_OPS {
                let dot: f64 = t.signature(i).iter().zip(t.signature(j)).map(|(a, b)| a * b).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn train_batch_fake_counts() {
        let t = task();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let region = Region {
            organs: OrganSet::FULL,
            area: 1.0,
        };
        for (q, fakes) in [(0.0, 0), (1.0, 32), (0.5, 16)] {
            let b = t.make_train_batch(q, &region, 3, 32, &mut rng).unwrap();
            assert_eq!(b.len(), 32);
            assert_eq!(b.iter().filter(|s| s.is_fake()).count(), fakes);
            assert!(b.iter().filter(|s| s.is_fake()).all(|s| s.op_used == Some(3)));
        }
        assert!(t.make_train_batch(0.5, &region, 3, 0, &mut rng).is_err());
    }

    #[test]
    fn validation_set_is_balanced_and_uniform_over_ops() {
        let t = task();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = t.make_validation_set(7000, &mut rng).unwrap();
        assert_eq!(v.iter().filter(|s| s.is_fake()).count(), 3500);
        let mut hist = [0usize; NUM_OPS];
        for s in v.iter().filter(|s| s.is_fake()) {
            hist[s.op_used.unwrap()] += 1;
        }
        assert_eq!(hist, [500; NUM_OPS]);
        assert!(t.make_validation_set(7, &mut rng).is_err());
        let again = t.make_validation_set(7000, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(v, again);
    }

    #[test]
    fn causal_oracle_is_invariant_to_shift_and_spurious_oracle_is_not() {
        let t = task();
        let val = t.make_validation_set(4000, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let shift = t.spurious_shift_of(&val, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let labels: Vec<f64> = val.iter().map(SyntheticSample::label_f64).collect();
        let auc = |set: &[SyntheticSample], f: &dyn Fn(&SyntheticSample) -> f64| {
            roc_auc(&set.iter().map(f).collect::<Vec<_>>(), &labels).unwrap()
        };
        let causal = |s: &SyntheticSample| t.causal_score(s);
        let spurious = |s: &SyntheticSample| t.spurious_score(s);
        assert_eq!(auc(&val, &causal), auc(&shift, &causal));
        // Spurious-sum separation 2 / (0.5·√7·√2) ≈ 1.069 standard units.
        assert!((auc(&val, &spurious) - 0.8575).abs() < 0.03);
        assert!((auc(&shift, &spurious) - 0.5).abs() < 0.03);
        assert!(shift.iter().filter(|s| s.is_fake()).count() == 2000);
    }

    #[test]
    fn shift_set_changes_each_fake_operator_signature() {
        let t = task();
        let val = t.make_validation_set(140, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let shift = t.spurious_shift_of(&val, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        let sb = t.spurious_block();
        for (a, b) in val.iter().zip(&shift).filter(|(a, _)| a.is_fake()) {
            let own = sb.start + a.op_used.unwrap();
            assert!((b.features[own] - (a.features[own] - 2.0)).abs() < 1e-12);
        }
        assert!(t.spurious_shift_set(9, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn csv_export_layout() {
        let t = task();
        let x = &t.generate_real(1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()[0];
        let y = t.apply_augmentation(x, 2, OrganSet::FULL).unwrap();
        let csv = samples_to_csv(&[x.clone(), y]);
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with("label,op,f0,f1"));
        assert!(lines[1].starts_with("0,,"));
        assert!(lines[2].starts_with("1,2,"));
        assert_eq!(lines[1].split(',').count(), 2 + t.input_dim());
    }
}
