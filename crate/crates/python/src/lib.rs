//! Python bindings over the `evobrain` core crate.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use evobrain::expressivity::run_hierarchy_suite;
use evobrain::graphgen::build_dynamic;
use evobrain::training::{auroc as core_auroc, f1_best_threshold};
use evobrain::{Error, Tensor};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Area under the ROC curve with ties counted as one half.
#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    core_auroc(&scores, &labels).map_err(to_py)
}

/// Best F1 over midpoint thresholds, as `(f1, threshold)`.
#[pyfunction]
fn f1_best(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<(f64, f64)> {
    f1_best_threshold(&scores, &labels).map_err(to_py)
}

/// Top-`tau` dynamic adjacency per step for features shaped `[nodes][steps][dim]`.
///
/// Returns one row-major `nodes * nodes` weight list per step.
#[pyfunction]
fn dynamic_graph(features: Vec<Vec<Vec<f64>>>, tau: usize) -> PyResult<Vec<Vec<f64>>> {
    let n = features.len();
    let t = features.first().map_or(0, Vec::len);
    let d = features.first().and_then(|f| f.first()).map_or(0, Vec::len);
    let mut flat = Vec::with_capacity(n * t * d);
    for node in &features {
        if node.len() != t || node.iter().any(|s| s.len() != d) {
            return Err(PyValueError::new_err("features must be a rectangular [nodes][steps][dim] array"));
        }
        node.iter().for_each(|s| flat.extend_from_slice(s));
    }
    let x = Tensor::new(vec![n, t, d], flat).map_err(to_py)?;
    let g = build_dynamic(&x, tau).map_err(to_py)?;
    Ok((0..t).map(|s| (0..n * n).map(|k| g.weight(k / n, k % n, s)).collect()).collect())
}

/// Runs the expressivity hierarchy suite, returning `(table, ok)`.
#[pyfunction]
#[pyo3(signature = (seeds = 20, hidden = 8))]
fn expressivity(seeds: u64, hidden: usize) -> PyResult<(String, bool)> {
    let seeds: Vec<u64> = (1..=seeds).collect();
    let report = run_hierarchy_suite(&seeds, hidden).map_err(to_py)?;
    Ok((report.table(), report.violations().is_empty()))
}

/// Runs the command line with `args` (without the program name) and returns its exit code.
#[pyfunction]
fn main(args: Vec<String>) -> i32 {
    evobrain::cli::run(std::iter::once("evobrain".to_string()).chain(args))
}

#[pymodule]
fn evobrain_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(f1_best, m)?)?;
    m.add_function(wrap_pyfunction!(dynamic_graph, m)?)?;
    m.add_function(wrap_pyfunction!(expressivity, m)?)?;
    m.add_function(wrap_pyfunction!(main, m)?)?;
    Ok(())
}
