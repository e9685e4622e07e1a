//! Python bindings for the robust DDPC crate.
//!
//! Built as a plain `cdylib`; see `python/smoke_test.py` for how the module
//! is located and loaded without maturin.

use nalgebra::DVector;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use rddpc::controllers::{solve_frddpc, solve_pbr, solve_rddpc, solve_spc, PbrMode};
use rddpc::harness::{
    self, ControllerKind, ExperimentConfig, LambdaSpec, PreparedData,
};

fn runtime_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_kind(name: &str) -> PyResult<ControllerKind> {
    name.parse::<ControllerKind>().map_err(value_err)
}

/// Experiment configuration mirroring the TOML schema used by the CLI.
#[pyclass(name = "ExperimentConfig", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    /// Benchmark defaults, optionally overridden by a TOML string.
    #[new]
    #[pyo3(signature = (toml=None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(s) => ExperimentConfig::from_toml_str(s).map_err(value_err)?,
            None => ExperimentConfig::default(),
        };
        inner.validate().map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_toml_file(path: &str) -> PyResult<Self> {
        let inner =
            ExperimentConfig::from_toml_path(std::path::Path::new(path)).map_err(value_err)?;
        inner.validate().map_err(value_err)?;
        Ok(Self { inner })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(runtime_err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn trials(&self) -> usize {
        self.inner.trials
    }

    #[setter]
    fn set_trials(&mut self, trials: usize) {
        self.inner.trials = trials;
    }

    #[getter]
    fn n_test(&self) -> usize {
        self.inner.n_test
    }

    #[setter]
    fn set_n_test(&mut self, n_test: usize) {
        self.inner.n_test = n_test;
    }

    #[getter]
    fn l_p(&self) -> usize {
        self.inner.l_p
    }

    #[getter]
    fn l_f(&self) -> usize {
        self.inner.l_f
    }

    fn set_fixed_lambda(&mut self, value: f64) {
        self.inner.lambda = LambdaSpec::Fixed { value };
    }

    fn set_tuned_lambda(&mut self) {
        self.inner.lambda = LambdaSpec::Tuned;
    }

    fn set_controllers(&mut self, names: Vec<String>) -> PyResult<()> {
        let kinds: Vec<_> =
            names.iter().map(|n| parse_kind(n)).collect::<PyResult<_>>()?;
        self.inner.controllers = kinds;
        Ok(())
    }

    fn __repr__(&self) -> String {
        format!(
            "ExperimentConfig(seed={}, trials={}, n_test={}, l_p={}, l_f={})",
            self.inner.seed, self.inner.trials, self.inner.n_test, self.inner.l_p,
            self.inner.l_f
        )
    }
}

/// Offline data plus the uncertainty model built from it; the entry point
/// for per-step solves and single closed-loop trials.
#[pyclass(name = "Experiment")]
struct PyExperiment {
    config: ExperimentConfig,
    prepared: PreparedData,
    lambda: f64,
}

#[pymethods]
impl PyExperiment {
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        let config = config.inner.clone();
        let prepared =
            harness::prepare_data(&config, config.seed.wrapping_add(0xda7a)).map_err(runtime_err)?;
        let lambda = harness::resolve_lambda(&config, &prepared.data).map_err(runtime_err)?;
        Ok(Self { config, prepared, lambda })
    }

    /// Resolved Lambda (fixed value or validation-tuned).
    #[getter]
    fn lambda_(&self) -> f64 {
        self.lambda
    }

    /// ||Y_f Phi_perp|| / ||Y_f|| for the offline data.
    fn residual_ratio(&self) -> f64 {
        let m = self.prepared.data.m.clone().svd(false, false).singular_values.max();
        let yf = self.prepared.data.yf.clone().svd(false, false).singular_values.max();
        m / yf
    }

    /// One conic solve given stacked past windows and a horizon reference.
    /// Returns the full planned input, the applied (first-step) input, and
    /// the solver diagnostics.
    #[pyo3(signature = (controller, u_p, y_p, y_r, lambda=None))]
    fn solve<'py>(
        &self,
        py: Python<'py>,
        controller: &str,
        u_p: Vec<f64>,
        y_p: Vec<f64>,
        y_r: Vec<f64>,
        lambda: Option<f64>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let kind = parse_kind(controller)?;
        let lambda = lambda.unwrap_or(self.lambda);
        let ctl = self.config.control_config(DVector::from_vec(y_r), lambda);
        let u_p = DVector::from_vec(u_p);
        let y_p = DVector::from_vec(y_p);
        let model = &self.prepared.model;
        let sol = match kind {
            ControllerKind::Spc => solve_spc(model, &ctl, &u_p, &y_p),
            ControllerKind::Pbr => {
                let mode =
                    if lambda > 0.0 { PbrMode::Penalty(lambda) } else { PbrMode::Constraint(0.0) };
                solve_pbr(model, &ctl, &u_p, &y_p, mode).map(|s| s.solution)
            }
            ControllerKind::Rddpc if lambda > 0.0 => solve_rddpc(model, &ctl, &u_p, &y_p),
            ControllerKind::Frddpc if lambda > 0.0 => solve_frddpc(model, &ctl, &u_p, &y_p),
            _ => solve_spc(model, &ctl, &u_p, &y_p),
        }
        .map_err(runtime_err)?;
        let out = PyDict::new(py);
        out.set_item("u_f", sol.u_f.as_slice().to_vec())?;
        out.set_item("u_applied", sol.applied(model.n_u).as_slice().to_vec())?;
        out.set_item("objective", sol.objective)?;
        out.set_item("psi", sol.psi)?;
        out.set_item("solve_time", sol.solve_time)?;
        Ok(out)
    }

    /// One receding-horizon closed-loop trial; returns cost and tracking
    /// summaries.
    #[pyo3(signature = (controller, seed=None, lambda=None))]
    fn run_trial<'py>(
        &self,
        py: Python<'py>,
        controller: &str,
        seed: Option<u64>,
        lambda: Option<f64>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let kind = parse_kind(controller)?;
        let seed = seed.unwrap_or(self.config.seed);
        let lambda = lambda.unwrap_or(self.lambda);
        let trial =
            harness::run_receding_horizon(&self.config, kind, &self.prepared, lambda, seed)
                .map_err(runtime_err)?;
        let out = PyDict::new(py);
        out.set_item("controller", kind.name())?;
        out.set_item("seed", seed)?;
        out.set_item("lambda", lambda)?;
        out.set_item("j_total", trial.j_total)?;
        out.set_item("tracking_error", trial.tracking_error)?;
        out.set_item("solve_times", trial.solve_times)?;
        out.set_item("error", trial.error)?;
        Ok(out)
    }
}

/// Validation-based Lambda tuning for the config's data-collection setup.
#[pyfunction]
fn tune_lambda(config: &PyConfig) -> PyResult<f64> {
    let mut cfg = config.inner.clone();
    cfg.lambda = LambdaSpec::Tuned;
    let prepared =
        harness::prepare_data(&cfg, cfg.seed.wrapping_add(0xda7a)).map_err(runtime_err)?;
    harness::resolve_lambda(&cfg, &prepared.data).map_err(runtime_err)
}

/// Paired-seed Monte Carlo campaign; returns per-controller aggregates.
#[pyfunction]
#[pyo3(signature = (config, trials=None))]
fn monte_carlo<'py>(
    py: Python<'py>,
    config: &PyConfig,
    trials: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let n = trials.unwrap_or(config.inner.trials);
    let report = harness::monte_carlo(&config.inner, n, None).map_err(runtime_err)?;
    let out = PyDict::new(py);
    out.set_item("lambda", report.lambda)?;
    for (name, agg) in &report.aggregate {
        let row = PyDict::new(py);
        row.set_item("mean_j", agg.mean_j)?;
        row.set_item("median_j", agg.median_j)?;
        row.set_item("std_j", agg.std_j)?;
        row.set_item("mean_tracking_error", agg.mean_tracking_error)?;
        row.set_item("n_trials", agg.n_trials)?;
        row.set_item("n_failed", agg.n_failed)?;
        out.set_item(name, row)?;
    }
    Ok(out)
}

/// Mean J_total per (controller, Lambda); returns rows of
/// (controller, lambda, mean_j, std_j, argmin).
#[pyfunction]
fn grid_search(config: &PyConfig, grid: Vec<f64>) -> PyResult<Vec<(String, f64, f64, f64, bool)>> {
    let table = harness::grid_search_lambda(&config.inner, &grid).map_err(runtime_err)?;
    Ok(table
        .rows
        .into_iter()
        .map(|r| (r.controller.name().to_string(), r.lambda, r.mean_j, r.std_j, r.argmin))
        .collect())
}

#[pymodule]
fn rddpc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(tune_lambda, m)?)?;
    m.add_function(wrap_pyfunction!(monte_carlo, m)?)?;
    m.add_function(wrap_pyfunction!(grid_search, m)?)?;
    Ok(())
}
