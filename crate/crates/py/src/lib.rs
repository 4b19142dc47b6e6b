//! Python bindings: load or generate layered MDPs, query the exact DP
//! oracles, run the optimistic policy search, and verify the structural
//! properties, all from Python.

use nalgebra::DVector;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use opsdp_core::csc::cells::{bfs_sign_regions, DEFAULT_CELL_CAP};
use opsdp_core::csc::lp::DEFAULT_STRICT_TOL;
use opsdp_core::csc::CscOracle;
use opsdp_core::harness::ExperimentConfig;
use opsdp_core::mdp::LayeredMdp;
use opsdp_core::params::Params;
use opsdp_core::policy::Policy;
use opsdp_core::verify::{verify_suite, VerifyOptions};
use opsdp_core::{dp, fixtures, io, psdp};

fn err(e: opsdp_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A layered MDP.
#[pyclass(name = "Mdp")]
struct PyMdp {
    inner: LayeredMdp,
}

#[pymethods]
impl PyMdp {
    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.feature_dim()
    }

    #[getter]
    fn num_actions(&self) -> usize {
        self.inner.num_actions()
    }

    #[getter]
    fn layer_sizes(&self) -> Vec<usize> {
        self.inner.layer_sizes().to_vec()
    }

    /// Serialize to the text format.
    fn to_text(&self) -> String {
        io::to_text(&self.inner)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        io::save_mdp(&self.inner, path).map_err(err)
    }

    /// Value of the optimal deterministic policy.
    fn optimal_value(&self) -> PyResult<f64> {
        Ok(dp::optimal_policy(&self.inner).map_err(err)?.1)
    }

    fn optimal_policy(&self) -> PyResult<(PyPolicy, f64)> {
        let (pi, j) = dp::optimal_policy(&self.inner).map_err(err)?;
        Ok((PyPolicy { inner: pi }, j))
    }

    /// Exact value of a policy.
    fn policy_value(&self, policy: &PyPolicy) -> PyResult<f64> {
        dp::policy_value(&self.inner, &policy.inner).map_err(err)
    }

    fn uniform_policy_value(&self) -> PyResult<f64> {
        dp::policy_value(&self.inner, &Policy::Uniform).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Mdp(horizon={}, layers={:?}, actions={}, feature_dim={})",
            self.inner.horizon(),
            self.inner.layer_sizes(),
            self.inner.num_actions(),
            self.inner.feature_dim()
        )
    }
}

/// An opaque policy value.
#[pyclass(name = "Policy")]
struct PyPolicy {
    inner: Policy,
}

#[pymethods]
impl PyPolicy {
    /// The action taken at (layer, state); None means uniformly random.
    fn act(&self, mdp: &PyMdp, layer: usize, state: usize) -> PyResult<Option<usize>> {
        match self.inner.act(&mdp.inner, layer, state).map_err(err)? {
            opsdp_core::policy::ActionSelection::Action(a) => Ok(Some(a)),
            opsdp_core::policy::ActionSelection::Uniform => Ok(None),
        }
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }
}

#[pyclass(name = "RunResult")]
struct PyRunResult {
    #[pyo3(get)]
    j_returned: f64,
    #[pyo3(get)]
    j_optimal: Option<f64>,
    #[pyo3(get)]
    suboptimality: Option<f64>,
    #[pyo3(get)]
    best_iteration: usize,
    #[pyo3(get)]
    episodes: u64,
    #[pyo3(get)]
    oracle_calls: usize,
    #[pyo3(get)]
    jsonl: String,
    policy: Policy,
}

#[pymethods]
impl PyRunResult {
    fn policy(&self) -> PyPolicy {
        PyPolicy {
            inner: self.policy.clone(),
        }
    }
}

/// Load one of the named fixtures: T1, C3, L1 or X1.
#[pyfunction]
fn fixture(name: &str) -> PyResult<PyMdp> {
    fixtures::by_name(name)
        .map(|inner| PyMdp { inner })
        .ok_or_else(|| PyValueError::new_err(format!("unknown fixture {name:?}")))
}

#[pyfunction]
fn fixture_names() -> Vec<&'static str> {
    fixtures::fixtures().into_iter().map(|(n, _)| n).collect()
}

/// Load an MDP from the text format.
#[pyfunction]
fn load_mdp(path: &str) -> PyResult<PyMdp> {
    Ok(PyMdp {
        inner: io::load_mdp(path).map_err(err)?,
    })
}

/// Run the algorithm. `overrides` are `key=value` strings applied on top of
/// the chosen profile.
#[pyfunction]
#[pyo3(signature = (mdp, profile="desk", seed=0, overrides=vec![]))]
fn run(mdp: &PyMdp, profile: &str, seed: u64, overrides: Vec<String>) -> PyResult<PyRunResult> {
    let mut params = match profile {
        "desk" => Params::desk(),
        "theory" => Params::theory(0.1, 0.05, &mdp.inner).map_err(err)?,
        other => return Err(PyValueError::new_err(format!("unknown profile {other:?}"))),
    };
    for o in &overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| PyValueError::new_err(format!("override {o:?} is not key=value")))?;
        params.set(k.trim(), v.trim()).map_err(err)?;
    }
    let mut oracle = CscOracle::cells(params.gate_vectors);
    let (policy, metrics) = psdp::run(&mdp.inner, &params, &mut oracle, seed).map_err(err)?;
    Ok(PyRunResult {
        j_returned: metrics.summary.j_returned,
        j_optimal: metrics.summary.j_optimal,
        suboptimality: metrics.summary.suboptimality,
        best_iteration: metrics.summary.best_tau,
        episodes: metrics.summary.episodes,
        oracle_calls: metrics.summary.csc_calls,
        jsonl: metrics.to_jsonl().map_err(err)?,
        policy,
    })
}

/// Run the verification suite; returns (all_passed, rendered_text, json).
#[pyfunction]
#[pyo3(signature = (mdp, seed=0, draws=20))]
fn verify(mdp: &PyMdp, seed: u64, draws: usize) -> PyResult<(bool, String, String)> {
    let report = verify_suite(
        &mdp.inner,
        &VerifyOptions {
            seed,
            draws,
            ..VerifyOptions::default()
        },
    )
    .map_err(err)?;
    let json =
        serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok((report.all_passed, report.render(), json))
}

/// Enumerate the sign regions of a list of normal vectors; returns
/// (signs, representative, margin) per cell.
#[pyfunction]
fn enumerate_cells(vectors: Vec<Vec<f64>>) -> PyResult<Vec<(Vec<bool>, Vec<f64>, f64)>> {
    let vs: Vec<DVector<f64>> = vectors.into_iter().map(DVector::from_vec).collect();
    let cells = bfs_sign_regions(&vs, DEFAULT_CELL_CAP, DEFAULT_STRICT_TOL).map_err(err)?;
    Ok(cells
        .cells
        .into_iter()
        .map(|c| {
            (
                c.signs,
                c.representative.iter().cloned().collect(),
                c.margin,
            )
        })
        .collect())
}

/// Upper bound on the benchmark-class growth function.
#[pyfunction]
fn growth_bound(n: usize, d: usize, a: usize) -> f64 {
    opsdp_core::csc::growth_bound(n, d, a)
}

/// Resolve an MDP source string the same way the CLI does (`fixture:NAME`
/// or a file path).
#[pyfunction]
fn load_source(source: &str) -> PyResult<PyMdp> {
    Ok(PyMdp {
        inner: ExperimentConfig::new(source).load_mdp().map_err(err)?,
    })
}

#[pymodule]
fn opsdp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMdp>()?;
    m.add_class::<PyPolicy>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(fixture, m)?)?;
    m.add_function(wrap_pyfunction!(fixture_names, m)?)?;
    m.add_function(wrap_pyfunction!(load_mdp, m)?)?;
    m.add_function(wrap_pyfunction!(load_source, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(enumerate_cells, m)?)?;
    m.add_function(wrap_pyfunction!(growth_bound, m)?)?;
    Ok(())
}
