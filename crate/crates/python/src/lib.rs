//! Python bindings: `robust_sur.fit` on nested lists (or anything that
//! converts to them, such as `ndarray.tolist()`).

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ::robust_sur::metrics;
use ::robust_sur::{Equation, Method, SurError, SurSystem};

fn to_py_err(e: SurError) -> PyErr {
    match e {
        SurError::InvalidInput(_)
        | SurError::DimensionMismatch { .. }
        | SurError::RankDeficient { .. }
        | SurError::Unsupported(_)
        | SurError::Spec(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>], what: &str) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let p = rows.first().map_or(0, Vec::len);
    if let Some(k) = rows.iter().position(|r| r.len() != p) {
        return Err(PyValueError::new_err(format!(
            "{what}: row {k} has {} entries, expected {p}",
            rows[k].len()
        )));
    }
    Ok(DMatrix::from_fn(n, p, |k, j| rows[k][j]))
}

fn nested(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    a.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn build_system(responses: Vec<Vec<f64>>, designs: Vec<Vec<Vec<f64>>>) -> PyResult<SurSystem> {
    if responses.len() != designs.len() {
        return Err(PyValueError::new_err(format!(
            "{} responses but {} designs",
            responses.len(),
            designs.len()
        )));
    }
    let equations = responses
        .into_iter()
        .zip(&designs)
        .enumerate()
        .map(|(i, (y, x))| Ok(Equation::new(DVector::from_vec(y), matrix(x, &format!("design {i}"))?)))
        .collect::<PyResult<Vec<_>>>()?;
    let system = SurSystem::new(equations).map_err(to_py_err)?;
    system.check_rank().map_err(to_py_err)?;
    Ok(system)
}

/// Fits a SUR system.
///
/// `responses[i]` is the length-n response of equation i and `designs[i]` its
/// n x p_i design given row by row. Returns a dict with per-equation
/// coefficients, both covariance estimates, residuals, cell weights and, when
/// `inference` is true, standard errors, z, p-values and R-squared.
#[pyfunction]
#[pyo3(signature = (responses, designs, method = "surerob", seed = 0, inference = false))]
fn fit<'py>(
    py: Python<'py>,
    responses: Vec<Vec<f64>>,
    designs: Vec<Vec<Vec<f64>>>,
    method: &str,
    seed: u64,
    inference: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let method: Method = method.parse().map_err(to_py_err)?;
    let system = build_system(responses, designs)?;
    let table = py.detach(|| -> Result<_, SurError> {
        let fit = ::robust_sur::fit(&system, method, seed)?;
        let table = if inference {
            Some(metrics::system_inference(&fit, &system)?)
        } else {
            None
        };
        Ok((fit, table))
    });
    let (fit, table) = table.map_err(to_py_err)?;

    let out = PyDict::new(py);
    out.set_item("method", fit.method.name())?;
    let beta: Vec<Vec<f64>> = system
        .split_beta(&fit.beta)
        .iter()
        .map(|b| b.iter().copied().collect())
        .collect();
    out.set_item("beta", beta)?;
    out.set_item("sigma1", nested(&fit.sigma1))?;
    out.set_item("sigma2", nested(&fit.sigma2))?;
    out.set_item("residuals", nested(&fit.residuals.values))?;
    out.set_item("cell_weights", nested(&fit.cell_weights))?;
    out.set_item("scales", fit.scales.clone())?;
    out.set_item("iterations", fit.diagnostics.iterations.clone())?;
    out.set_item("log_det_trace", fit.diagnostics.log_det_trace.clone())?;
    out.set_item("warnings", fit.diagnostics.warnings.clone())?;
    if let Some(table) = table {
        let col = |f: fn(&metrics::CoefficientRow) -> f64| -> Vec<f64> { table.coefficients.iter().map(f).collect() };
        out.set_item("std_error", col(|r| r.std_error))?;
        out.set_item("z", col(|r| r.z))?;
        out.set_item("p_value", col(|r| r.p_value))?;
        let r2: Vec<f64> = table.equations.iter().map(|e| e.r_squared).collect();
        out.set_item("r_squared", r2)?;
        out.set_item("system_r_squared", table.system_r_squared)?;
    }
    Ok(out)
}

#[pymodule]
#[pyo3(name = "robust_sur")]
fn robust_sur_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    Ok(())
}
