//! Python bindings: the main vector operations, schedule helpers, and the
//! experiment harness behind a small flat API.
//!
//! Build with `cargo build --release -p fedamd-py`; the resulting
//! `libfedamd_py.so` imports as the module `fedamd_py` once renamed
//! (see python/smoke_test.py).

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use fedamd::harness;
use fedamd::numerics;
use fedamd::schedules;
use fedamd::Error;

fn to_py_err(err: Error) -> PyErr {
    if err.is_user_error() {
        PyValueError::new_err(err.to_string())
    } else {
        PyRuntimeError::new_err(err.to_string())
    }
}

/// Flat parameter vector with fixed dimension and finite entries.
#[pyclass]
#[derive(Clone)]
struct ParamVector {
    inner: numerics::ParamVector,
}

#[pymethods]
impl ParamVector {
    #[new]
    fn new(values: Vec<f64>) -> PyResult<Self> {
        Ok(ParamVector {
            inner: numerics::ParamVector::new(values).map_err(to_py_err)?,
        })
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn to_list(&self) -> Vec<f64> {
        self.inner.as_slice().to_vec()
    }

    /// alpha * self + other, elementwise.
    fn axpy(&self, alpha: f64, other: &ParamVector) -> PyResult<ParamVector> {
        Ok(ParamVector {
            inner: numerics::axpy(alpha, &self.inner, &other.inner).map_err(to_py_err)?,
        })
    }

    fn l2_norm_sq(&self) -> f64 {
        numerics::l2_norm_sq(&self.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.dim()
    }

    fn __repr__(&self) -> String {
        format!("ParamVector(dim={})", self.inner.dim())
    }
}

/// Anchor-probability schedule: constant p or the sequential tau-pattern.
#[pyclass]
#[derive(Clone)]
struct Schedule {
    inner: schedules::Schedule,
}

#[pymethods]
impl Schedule {
    #[staticmethod]
    fn constant(p: f64) -> PyResult<Self> {
        Ok(Schedule {
            inner: schedules::Schedule::constant(p).map_err(to_py_err)?,
        })
    }

    #[staticmethod]
    fn sequential(tau: u32) -> PyResult<Self> {
        Ok(Schedule {
            inner: schedules::Schedule::sequential(tau).map_err(to_py_err)?,
        })
    }

    fn prob_at(&self, t: u64) -> f64 {
        self.inner.prob_at(t)
    }
}

/// alpha * x + y, elementwise.
#[pyfunction]
fn axpy(alpha: f64, x: Vec<f64>, y: Vec<f64>) -> PyResult<Vec<f64>> {
    let x = numerics::ParamVector::new(x).map_err(to_py_err)?;
    let y = numerics::ParamVector::new(y).map_err(to_py_err)?;
    Ok(numerics::axpy(alpha, &x, &y).map_err(to_py_err)?.into())
}

/// Sum of squared entries.
#[pyfunction]
fn l2_norm_sq(x: Vec<f64>) -> PyResult<f64> {
    let x = numerics::ParamVector::new(x).map_err(to_py_err)?;
    Ok(numerics::l2_norm_sq(&x))
}

/// The constant anchor probability minimizing the nonconvex round bound.
#[pyfunction]
#[pyo3(signature = (participants, c = 1.0))]
fn optimal_constant_p(participants: u32, c: f64) -> PyResult<f64> {
    schedules::optimal_constant_p(participants, c).map_err(to_py_err)
}

/// The PL-regime constant anchor probability.
#[pyfunction]
#[pyo3(signature = (participants, c, mu))]
fn optimal_constant_p_pl(participants: u32, c: f64, mu: f64) -> PyResult<f64> {
    schedules::optimal_constant_p_pl(participants, c, mu).map_err(to_py_err)
}

/// Theorem-preset learning rates (eta_l, eta_s) for a regime:
/// "sequential-nonconvex", "constant-nonconvex", or "constant-pl".
#[pyfunction]
#[pyo3(signature = (regime, l, local_updates, clients_total, participants,
                    c = 1.0, l_sigma = 0.0, sigma = 0.0, batch_small = 1,
                    mu = None, tau = None))]
#[allow(clippy::too_many_arguments)]
fn preset_lrs(
    regime: &str,
    l: f64,
    local_updates: u32,
    clients_total: u32,
    participants: u32,
    c: f64,
    l_sigma: f64,
    sigma: f64,
    batch_small: u32,
    mu: Option<f64>,
    tau: Option<u32>,
) -> PyResult<(f64, f64)> {
    let regime = match regime {
        "sequential-nonconvex" => schedules::LrRegime::SequentialNonconvex,
        "constant-nonconvex" => schedules::LrRegime::ConstantNonconvex,
        "constant-pl" => schedules::LrRegime::ConstantPl,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown learning-rate regime \"{other}\""
            )))
        }
    };
    let hp = schedules::HyperPreset {
        l,
        l_sigma,
        sigma,
        mu,
        c,
        local_updates,
        batch_small,
        clients_total,
        participants,
    };
    schedules::preset_lrs(regime, &hp, tau).map_err(to_py_err)
}

fn parse_with_overrides(
    config_toml: &str,
    seed: Option<u64>,
) -> PyResult<harness::ExperimentConfig> {
    let mut cfg = harness::parse_config(config_toml).map_err(to_py_err)?;
    if let Some(seed) = seed {
        cfg.run.seed = seed;
    }
    Ok(cfg)
}

/// Runs one experiment from a TOML config string and returns the per-round
/// CSV. `threads = 0` sizes the worker pool automatically.
#[pyfunction]
#[pyo3(signature = (config_toml, seed = None, threads = 0))]
fn run_experiment_csv(config_toml: &str, seed: Option<u64>, threads: usize) -> PyResult<String> {
    let cfg = parse_with_overrides(config_toml, seed)?;
    let artifact = harness::run_experiment_with_threads(&cfg, threads).map_err(to_py_err)?;
    Ok(harness::to_csv(&artifact))
}

/// Runs one experiment and returns the full artifact (config echo, reports,
/// summary) as a JSON string.
#[pyfunction]
#[pyo3(signature = (config_toml, seed = None, threads = 0))]
fn run_experiment_json(config_toml: &str, seed: Option<u64>, threads: usize) -> PyResult<String> {
    let cfg = parse_with_overrides(config_toml, seed)?;
    let artifact = harness::run_experiment_with_threads(&cfg, threads).map_err(to_py_err)?;
    harness::to_json(&artifact).map_err(to_py_err)
}

/// Runs several configs on a shared dataset and returns the comparison table
/// (one row per algorithm, sorted by name) as CSV.
#[pyfunction]
#[pyo3(signature = (config_tomls, seeds = 1))]
fn compare_csv(config_tomls: Vec<String>, seeds: u32) -> PyResult<String> {
    let mut cfgs = Vec::with_capacity(config_tomls.len());
    for text in &config_tomls {
        cfgs.push(harness::parse_config(text).map_err(to_py_err)?);
    }
    let table = harness::compare(&cfgs, seeds).map_err(to_py_err)?;
    Ok(harness::compare_to_csv(&table))
}

/// Parses an IDX image/label file pair; returns (features, labels, classes)
/// with pixels scaled to [0, 1].
#[pyfunction]
fn load_idx(
    images_path: std::path::PathBuf,
    labels_path: std::path::PathBuf,
) -> PyResult<(Vec<Vec<f64>>, Vec<usize>, usize)> {
    let ds = fedamd::data::load_idx(&images_path, &labels_path).map_err(to_py_err)?;
    let features = (0..ds.len())
        .map(|i| ds.features.row(i).to_vec())
        .collect();
    Ok((features, ds.labels.clone(), ds.classes))
}

#[pymodule]
fn fedamd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<ParamVector>()?;
    m.add_class::<Schedule>()?;
    m.add_function(wrap_pyfunction!(axpy, m)?)?;
    m.add_function(wrap_pyfunction!(l2_norm_sq, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_constant_p, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_constant_p_pl, m)?)?;
    m.add_function(wrap_pyfunction!(preset_lrs, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment_csv, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment_json, m)?)?;
    m.add_function(wrap_pyfunction!(compare_csv, m)?)?;
    m.add_function(wrap_pyfunction!(load_idx, m)?)?;
    Ok(())
}
