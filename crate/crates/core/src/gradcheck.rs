//! Central finite-difference gradient verification.

use crate::nn::ParamSet;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |analytic|)` over every parameter.
    pub max_rel_error: f64,
    pub worst_tensor: &'static str,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares `analytic` against central differences of `loss` at `params`.
pub fn check_gradient<P: ParamSet>(
    params: &P,
    analytic: &P,
    step: f64,
    mut loss: impl FnMut(&P) -> f64,
) -> GradCheckReport {
    let analytic_flat: Vec<(&'static str, usize, f64)> = analytic
        .tensors()
        .into_iter()
        .flat_map(|(name, t)| t.iter().enumerate().map(move |(i, g)| (name, i, *g)))
        .collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_tensor: "",
        worst_index: 0,
        checked: 0,
    };
    let mut probe = params.clone();
    for (k, &(name, idx, g)) in analytic_flat.iter().enumerate() {
        let original = flat_get(&probe, k);
        flat_set(&mut probe, k, original + step);
        let up = loss(&probe);
        flat_set(&mut probe, k, original - step);
        let down = loss(&probe);
        flat_set(&mut probe, k, original);
        let numeric = (up - down) / (2.0 * step);
        let err = (g - numeric).abs() / g.abs().max(1.0);
        let err = if err.is_nan() { f64::INFINITY } else { err };
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = report.max_rel_error.max(err);
            if err >= report.max_rel_error {
                report.worst_tensor = name;
                report.worst_index = idx;
            }
        }
        report.checked += 1;
    }
    report
}

fn flat_get<P: ParamSet>(p: &P, k: usize) -> f64 {
    let mut k = k;
    for (_, t) in p.tensors() {
        if k < t.len() {
            return t[k];
        }
        k -= t.len();
    }
    panic!("flat index out of range")
}

fn flat_set<P: ParamSet>(p: &mut P, k: usize, value: f64) {
    let mut k = k;
    for (_, t) in p.tensors_mut() {
        if k < t.len() {
            t[k] = value;
            return;
        }
        k -= t.len();
    }
    panic!("flat index out of range")
}
