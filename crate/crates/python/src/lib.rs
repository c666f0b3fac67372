//! Python bindings for the synchronization toolkit.
//!
//! The surface is deliberately small: scenario execution through the same
//! runner the command-line tool uses, plus a few direct entry points for
//! interactive exploration.

use std::collections::BTreeMap;

use num_complex::Complex64;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use vdp_sync::classical::{design_shortcut, find_branch_point, ClassicalParams, PhasePoint, ShortcutOptions};
use vdp_sync::designer::delta3;
use vdp_sync::fock::{coherent_state, moments, MomentSet, QuantumParams};
use vdp_sync::lindblad::{steady_state, SteadyStateOptions};
use vdp_sync::runner::{self, Scenario};
use vdp_sync::ErrorKind;

fn to_py(err: vdp_sync::Error) -> PyErr {
    match err.kind() {
        ErrorKind::Config => PyValueError::new_err(err.to_string()),
        _ => PyRuntimeError::new_err(err.to_string()),
    }
}

type Moments = (Complex64, Complex64, f64);

fn unpack(m: MomentSet) -> Moments {
    (m.mean, m.third, m.phonon)
}

fn quantum_params(delta: f64, kappa1: f64, kappa2: f64, dim: usize) -> QuantumParams {
    QuantumParams { delta, kappa1, kappa2, dim }
}

/// Names of the scenarios shipped with the library.
#[pyfunction]
fn bundled_scenarios() -> Vec<&'static str> {
    runner::BUNDLED.iter().map(|(name, _)| *name).collect()
}

/// Runs a scenario given as JSON text, or as a bundled scenario name, and
/// returns its output files as a mapping from relative path to bytes.
#[pyfunction]
fn run_scenario<'py>(py: Python<'py>, source: &str) -> PyResult<BTreeMap<String, Bound<'py, PyBytes>>> {
    let scenario = if source.trim_start().starts_with('{') {
        Scenario::from_json(source).map_err(to_py)?
    } else {
        runner::load(source).map_err(to_py)?.0
    };
    let files = py.detach(|| runner::execute(&scenario)).map_err(to_py)?;
    Ok(files.into_iter().map(|f| (f.path, PyBytes::new(py, &f.contents))).collect())
}

/// Phase-space point reached at `t_inf` by the classical locking example
/// started at the origin under the sudden drive.
#[pyfunction]
#[pyo3(signature = (t_inf = 50.125, dt = 1e-4))]
fn classical_branch_point(t_inf: f64, dt: f64) -> PyResult<(f64, f64)> {
    let b = find_branch_point(&ClassicalParams::locking_example(), t_inf, dt).map_err(to_py)?;
    Ok((b.point.x, b.point.y))
}

/// Designs the classical shortcut from the origin and returns the shooting
/// root together with the driving samples over the shortcut window.
#[pyfunction]
#[pyo3(signature = (tau = 0.25, t_inf = 50.125))]
fn classical_shortcut(py: Python<'_>, tau: f64, t_inf: f64) -> PyResult<(f64, Vec<(f64, f64)>)> {
    let design = py
        .detach(|| {
            design_shortcut(
                &ClassicalParams::locking_example(),
                PhasePoint::default(),
                tau,
                t_inf,
                &ShortcutOptions::default(),
            )
        })
        .map_err(to_py)?;
    Ok((design.shooting.gamma, design.driving.shortcut().to_vec()))
}

/// Mean, third moment and phonon number of a coherent state truncated to
/// `dim` levels.
#[pyfunction]
fn coherent_moments(alpha: Complex64, dim: usize) -> PyResult<Moments> {
    let rho = coherent_state(alpha, dim).map_err(to_py)?;
    moments(&rho).map(unpack).map_err(to_py)
}

/// Moments of the stationary state under a constant drive.
#[pyfunction]
#[pyo3(signature = (delta, kappa1, kappa2, eps1 = 0.0, eps2 = 0.0, dim = 40))]
fn steady_state_moments(
    py: Python<'_>,
    delta: f64,
    kappa1: f64,
    kappa2: f64,
    eps1: f64,
    eps2: f64,
    dim: usize,
) -> PyResult<Moments> {
    let p = quantum_params(delta, kappa1, kappa2, dim);
    let rho = py
        .detach(|| steady_state((eps1, eps2), &p, None, &SteadyStateOptions::default()))
        .map_err(to_py)?;
    moments(&rho).map(unpack).map_err(to_py)
}

/// Distance between two third moments, the figure of merit of the quantum
/// shortcut.
#[pyfunction]
fn third_moment_mismatch(a: Complex64, b: Complex64) -> f64 {
    let m = |third| MomentSet { mean: Complex64::new(0.0, 0.0), third, phonon: 0.0 };
    delta3(&m(a), &m(b))
}

#[pymodule]
fn vdp_sync_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(bundled_scenarios, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(classical_branch_point, m)?)?;
    m.add_function(wrap_pyfunction!(classical_shortcut, m)?)?;
    m.add_function(wrap_pyfunction!(coherent_moments, m)?)?;
    m.add_function(wrap_pyfunction!(steady_state_moments, m)?)?;
    m.add_function(wrap_pyfunction!(third_moment_mismatch, m)?)?;
    Ok(())
}
