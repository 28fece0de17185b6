//! Python bindings: point-cloud solvers, scaling composition and the CLI runner.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use eotlab::cli::{run as run_cli, Cli, Command, Common};
use eotlab::measure::Atoms;
use eotlab::numeric::Point;
use eotlab::scaling::{Scaling, Windows};
use eotlab::solvers::{self, entropic_cost, SinkhornConfig};
use eotlab::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Input(_) | Error::Json(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Points given as a list of 1- or 2-element coordinate lists.
fn atoms(points: Vec<Vec<f64>>, weights: Vec<f64>) -> PyResult<Atoms> {
    let dim = points.first().map_or(1, Vec::len);
    if points.iter().any(|p| p.len() != dim) || !(1..=2).contains(&dim) {
        return Err(PyValueError::new_err("points must all have 1 or all have 2 coordinates"));
    }
    let pts: Vec<Point> = points.iter().map(|p| [p[0], p.get(1).copied().unwrap_or(0.0)]).collect();
    Atoms::from_points(dim, pts, weights, 1.0, 0.5).map_err(to_py)
}

/// Entropic transport between two weighted point clouds.
#[pyfunction]
#[pyo3(signature = (x, a, y, b, epsilon, tol = 1e-9, max_iter = 100_000))]
#[allow(clippy::too_many_arguments)]
fn sinkhorn<'py>(
    py: Python<'py>,
    x: Vec<Vec<f64>>,
    a: Vec<f64>,
    y: Vec<Vec<f64>>,
    b: Vec<f64>,
    epsilon: f64,
    tol: f64,
    max_iter: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let (src, tgt) = (atoms(x, a)?, atoms(y, b)?);
    let mut cfg = SinkhornConfig::new(epsilon);
    cfg.tol = tol;
    cfg.max_iter = max_iter;
    let res = py.detach(|| solvers::sinkhorn(&src, &tgt, &cfg)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("cost", entropic_cost(&res))?;
    d.set_item("primal_cost", res.primal_cost)?;
    d.set_item("entropy", res.entropy)?;
    d.set_item("iterations", res.iterations)?;
    d.set_item("marg_err", res.marg_err)?;
    d.set_item("converged", res.converged)?;
    d.set_item("shape", (res.plan.n_source(), res.plan.n_target()))?;
    d.set_item("plan", res.plan.mass)?;
    d.set_item("f", res.f)?;
    d.set_item("g", res.g)?;
    Ok(d)
}

/// Exact quadratic transport between two weighted point clouds.
#[pyfunction]
fn exact_ot<'py>(
    py: Python<'py>,
    x: Vec<Vec<f64>>,
    a: Vec<f64>,
    y: Vec<Vec<f64>>,
    b: Vec<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let (src, tgt) = (atoms(x, a)?, atoms(y, b)?);
    let res = py.detach(|| solvers::exact_ot(&src, &tgt)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("cost", res.cost)?;
    d.set_item("duality_gap", res.duality_gap)?;
    d.set_item("pivots", res.pivots)?;
    d.set_item("shape", (res.plan.n_source(), res.plan.n_target()))?;
    d.set_item("plan", res.plan.mass)?;
    Ok(d)
}

/// `s2 <> s1` on JSON-encoded scalings (`{"A": [...], "b": [...], "gamma", "kappa"}`).
#[pyfunction]
fn compose(s2: &str, s1: &str) -> PyResult<String> {
    let parse = |s: &str| serde_json::from_str::<Scaling>(s).map_err(|e| PyValueError::new_err(e.to_string()));
    let out = Scaling::compose(&parse(s2)?, &parse(s1)?, &Windows::default()).map_err(to_py)?;
    serde_json::to_string(&out).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Runs `solve` (name `None`) or the named experiment exactly as the command
/// line would and returns the exit code.
#[pyfunction]
#[pyo3(signature = (config, experiment = None, out = None, seed = None))]
fn run(py: Python<'_>, config: String, experiment: Option<String>, out: Option<String>, seed: Option<u64>) -> i32 {
    let common = Common {
        config: config.into(),
        out: out.map(Into::into),
        seed,
    };
    let command = match experiment {
        None => Command::Solve(common),
        Some(name) => Command::Experiment { name, common },
    };
    py.detach(|| run_cli(Cli { command }))
}

#[pymodule]
pub fn pyeotlab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(sinkhorn, m)?)?;
    m.add_function(wrap_pyfunction!(exact_ot, m)?)?;
    m.add_function(wrap_pyfunction!(compose, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
