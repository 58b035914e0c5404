//! Python bindings: schedules, oracles, config handling and a stepwise
//! `Trainer`. Structured results come back as plain dicts.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use crda_core::checkpoint::Checkpoint;
use crda_core::engine::{self, TrainConfig};
use crda_core::{config, environments, ppo, rewards, schedules, CrdaError};

fn to_py(e: CrdaError) -> PyErr {
    if e.is_config() {
        PyValueError::new_err(e.to_string())
    } else if e.is_numeric() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn json_to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn load_config(text: &str, overrides: Vec<String>) -> PyResult<TrainConfig> {
    config::parse_with_overrides(text, &overrides).map_err(to_py)
}

/// Validated effective config text for `text` plus `section.key=value` overrides.
#[pyfunction]
#[pyo3(signature = (text = "", overrides = Vec::new()))]
fn effective_config(text: &str, overrides: Vec<String>) -> PyResult<String> {
    Ok(config::serialize(&load_config(text, overrides)?))
}

#[pyfunction]
#[pyo3(signature = (text = "", overrides = Vec::new()))]
fn schedule_csv(text: &str, overrides: Vec<String>) -> PyResult<String> {
    schedules::schedule_csv(&load_config(text, overrides)?.curriculum()).map_err(to_py)
}

/// `(q, beta, area_raw, area_clamped)` at epoch `t`.
#[pyfunction]
#[pyo3(signature = (t, text = "", overrides = Vec::new()))]
fn schedule_row(t: f64, text: &str, overrides: Vec<String>) -> PyResult<(f64, f64, f64, f64)> {
    let r = schedules::schedule_row(t, &load_config(text, overrides)?.curriculum()).map_err(to_py)?;
    Ok((r.q, r.beta, r.area_raw, r.area_clamped))
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<f64>) -> PyResult<f64> {
    rewards::roc_auc(&scores, &labels).map_err(to_py)
}

/// `(raw_advantages, advantages, returns)`; `values` holds one entry more than `rewards`.
#[pyfunction]
fn compute_gae(
    rewards: Vec<f64>,
    values: Vec<f64>,
    discount: f64,
    lam: f64,
) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let g = ppo::compute_gae(&rewards, &values, discount, lam).map_err(to_py)?;
    Ok((g.raw_advantages, g.advantages, g.returns))
}

#[pyfunction]
fn partition_batch<'py>(py: Python<'py>, entropies: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let p = environments::partition_batch(&entropies).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("dominant", p.dominant)?;
    d.set_item("adv1", p.adv1)?;
    d.set_item("adv2", p.adv2)?;
    d.set_item("adv3", p.adv3)?;
    Ok(d)
}

/// Applies ablation preset 1..=5 and returns the effective config text.
#[pyfunction]
#[pyo3(signature = (preset, text = "", overrides = Vec::new()))]
fn ablation_config(preset: u8, text: &str, overrides: Vec<String>) -> PyResult<String> {
    let mut cfg = load_config(text, overrides)?;
    engine::apply_preset(&mut cfg.engine, preset).map_err(to_py)?;
    Ok(config::serialize(&cfg))
}

#[pyclass(name = "Trainer")]
struct PyTrainer {
    inner: engine::Trainer,
}

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (text = "", overrides = Vec::new()))]
    fn new(text: &str, overrides: Vec<String>) -> PyResult<Self> {
        let inner = engine::Trainer::new(load_config(text, overrides)?).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(to_py)?;
        let inner = engine::Trainer::from_checkpoint(&ckpt).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch()
    }

    #[getter]
    fn finished(&self) -> bool {
        self.inner.is_finished()
    }

    fn config(&self) -> String {
        config::serialize(self.inner.config())
    }

    /// Runs one epoch and returns its metrics record.
    fn run_epoch<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let record = self.inner.run_epoch().map_err(to_py)?;
        json_to_py(py, &record)
    }

    /// Runs the remaining epochs; with `out_dir`, writes the usual run files.
    #[pyo3(signature = (out_dir = None))]
    fn run<'py>(&mut self, py: Python<'py>, out_dir: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
        let report = engine::run_to_completion(&mut self.inner, out_dir.as_deref()).map_err(to_py)?;
        json_to_py(py, &report.summary)
    }

    /// `(val_auc, val_ce, shift_auc, shift_ce)` of the current detector.
    fn evaluate(&self) -> PyResult<(f64, f64, f64, f64)> {
        let (va, vc) = engine::evaluate(self.inner.detector(), self.inner.validation_set()).map_err(to_py)?;
        let (sa, sc) = engine::evaluate(self.inner.detector(), self.inner.shift_set()).map_err(to_py)?;
        Ok((va, vc, sa, sc))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.checkpoint().save(&path).map_err(to_py)
    }
}

#[pymodule]
fn crda(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(effective_config, m)?)?;
    m.add_function(wrap_pyfunction!(schedule_csv, m)?)?;
    m.add_function(wrap_pyfunction!(schedule_row, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(compute_gae, m)?)?;
    m.add_function(wrap_pyfunction!(partition_batch, m)?)?;
    m.add_function(wrap_pyfunction!(ablation_config, m)?)?;
    Ok(())
}
