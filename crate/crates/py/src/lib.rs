//! Python bindings: solve a population file, evaluate the bound, answer a price.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fedprice::bound::convergence_gap_bound;
use fedprice::experiment;
use fedprice::formats::{PopulationFile, Scheme};
use fedprice::game::{client_best_response, SolverOptions};
use fedprice::{make_population, ClientProfile, GameConstants};

fn py_err(e: fedprice::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn load(population_toml: &str) -> PyResult<(Vec<ClientProfile>, GameConstants)> {
    let file = PopulationFile::from_toml_str(population_toml).map_err(py_err)?;
    let profiles = file.profiles().map_err(py_err)?;
    let constants = file
        .constants
        .ok_or_else(|| PyValueError::new_err("population has no [constants] table"))?;
    Ok((profiles, constants))
}

/// Solves one scheme for a population given as TOML text.
///
/// Returns a dict with `q`, `prices`, `spend`, `budget`, `bound`,
/// `lambda_star`, `v_threshold`, `caps_binding` and `negative_payments`.
#[pyfunction]
#[pyo3(signature = (population_toml, budget, scheme = "optimal"))]
fn solve<'py>(py: Python<'py>, population_toml: &str, budget: f64, scheme: &str) -> PyResult<Bound<'py, PyDict>> {
    let scheme: Scheme = scheme.parse().map_err(py_err)?;
    let (profiles, constants) = load(population_toml)?;
    let m = experiment::solve_scheme(scheme, &profiles, &constants, budget, &SolverOptions::default())
        .map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("scheme", m.scheme.as_str())?;
    out.set_item("q", m.participation())?;
    out.set_item("prices", m.prices())?;
    out.set_item("spend", m.spend)?;
    out.set_item("budget", m.budget)?;
    out.set_item("bound", m.bound_value)?;
    out.set_item("lambda_star", m.lambda_star)?;
    out.set_item("v_threshold", m.v_threshold)?;
    out.set_item("caps_binding", m.caps_binding)?;
    out.set_item("negative_payments", m.negative_payment_count())?;
    Ok(out)
}

/// Convergence-gap bound of a population at participation `q`.
#[pyfunction]
fn gap_bound(population_toml: &str, q: Vec<f64>) -> PyResult<f64> {
    let (profiles, constants) = load(population_toml)?;
    convergence_gap_bound(&q, &profiles, &constants).map_err(py_err)
}

/// Participation level a single client picks at `price`.
#[pyfunction]
#[pyo3(signature = (price, weight, grad_bound, cost, value, alpha, rounds, q_max = 1.0))]
#[allow(clippy::too_many_arguments)]
fn best_response(
    price: f64,
    weight: f64,
    grad_bound: f64,
    cost: f64,
    value: f64,
    alpha: f64,
    rounds: u32,
    q_max: f64,
) -> PyResult<f64> {
    if !(weight > 0.0 && weight <= 1.0) {
        return Err(PyValueError::new_err(format!("weight {weight} must lie in (0, 1]")));
    }
    // A second client carries the remaining weight; it does not affect the answer.
    let (d, g, c, v, caps) = if weight < 1.0 {
        (vec![weight, 1.0 - weight], vec![grad_bound, 1.0], vec![cost, 1.0], vec![value, 0.0], vec![q_max, 1.0])
    } else {
        (vec![1.0], vec![grad_bound], vec![cost], vec![value], vec![q_max])
    };
    let profiles = make_population(&d, &g, &c, &v, &caps).map_err(py_err)?;
    let constants = GameConstants::new(alpha, 0.0, rounds, 1);
    constants.validate_for(&profiles).map_err(py_err)?;
    Ok(client_best_response(price, &profiles[0], &constants))
}

/// Markdown report of a run directory.
#[pyfunction]
fn report(run_dir: PathBuf) -> PyResult<String> {
    let summary = experiment::report(&run_dir).map_err(py_err)?;
    Ok(experiment::render_markdown(&summary))
}

#[pymodule]
fn fedprice_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(gap_bound, m)?)?;
    m.add_function(wrap_pyfunction!(best_response, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    Ok(())
}
