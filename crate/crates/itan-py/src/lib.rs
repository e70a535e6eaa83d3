//! Python bindings: synthetic stream generation, detector runs over caller
//! data, ROC sweeps, and AUC — the same operations the CLI drives, exposed
//! as plain functions returning column-oriented dicts and tuples.

use nalgebra::DVector;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::str::FromStr;

use itan::baselines::{build_estimator, Algo};
use itan::data::{gen_gauss_mixture_stream, gen_sine_stream, mask_feedback, StreamRecord};
use itan::pipeline::{run_detector, DetectorConfig, ThresholdSpace};
use itan::threshold::CostPair;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Detector options shared by `run` and `roc_sweep`; defaults match the
/// library's.
#[allow(clippy::too_many_arguments)]
fn build_config(
    beta: f64,
    xi: f64,
    reset_two_means: bool,
    theta: f64,
    c1: f64,
    c_neg1: f64,
    g_lo: f64,
    g_hi: f64,
    log_space_threshold: bool,
    gmm_k: usize,
    em_seed: u64,
) -> PyResult<DetectorConfig> {
    let mut cfg = DetectorConfig::default();
    cfg.tree.beta = beta;
    cfg.tree.xi = xi;
    cfg.tree.reset_two_means_on_split = reset_two_means;
    cfg.theta = theta;
    cfg.costs = CostPair::new(c1, c_neg1).map_err(value_err)?;
    cfg.g_lo = g_lo;
    cfg.g_hi = g_hi;
    cfg.threshold_space = if log_space_threshold {
        ThresholdSpace::LogDensity
    } else {
        ThresholdSpace::Density
    };
    cfg.gmm_components = gmm_k;
    cfg.em_seed = em_seed;
    cfg.validate().map_err(value_err)?;
    Ok(cfg)
}

/// Assemble a labeled stream from parallel sample/label lists and apply
/// feedback masking.
fn build_stream(
    x: Vec<Vec<f64>>,
    label: Vec<i8>,
    feedback_prob: f64,
    seed: u64,
) -> PyResult<Vec<StreamRecord>> {
    if x.len() != label.len() {
        return Err(value_err(format!(
            "{} samples but {} labels",
            x.len(),
            label.len()
        )));
    }
    let stream: Vec<StreamRecord> = x
        .into_iter()
        .zip(label)
        .map(|(row, l)| StreamRecord::new(DVector::from_vec(row), Some(l), true))
        .collect::<itan::Result<_>>()
        .map_err(value_err)?;
    mask_feedback(&stream, feedback_prob, seed).map_err(value_err)
}

/// Generate a synthetic labeled stream.
///
/// Returns `(x, label)` where `x` is a list of feature lists and `label`
/// holds `+1` (anomalous) or `-1` (normal) per round.
#[pyfunction]
#[pyo3(signature = (exp, seed=0, n=1000))]
fn generate(exp: &str, seed: u64, n: usize) -> PyResult<(Vec<Vec<f64>>, Vec<i8>)> {
    let stream = match exp {
        "gauss" => gen_gauss_mixture_stream(seed, n),
        "sine" => gen_sine_stream(seed, n),
        other => return Err(value_err(format!("unknown experiment {other:?}"))),
    };
    let x = stream.iter().map(|r| r.x.iter().copied().collect()).collect();
    let label = stream.iter().map(|r| r.true_label.unwrap_or(-1)).collect();
    Ok((x, label))
}

/// Run one algorithm (`"itan"`, `"wgmm"`, `"wkde"`, or `"ml"`) over the
/// given samples and labels.
///
/// Returns a dict of per-round columns (`t`, `p_hat`, `tau`, `decision`,
/// `true_label`, `log_loss`, `zero_one`) plus the final `node_count`.
#[pyfunction]
#[pyo3(signature = (algo, x, label, *, feedback_prob=1.0, seed=0,
    beta=2.0, xi=0.8, reset_two_means=false, theta=0.5, c1=1.0, c_neg1=0.5,
    g_lo=0.0, g_hi=1.0, log_space_threshold=false, gmm_k=3, em_seed=0))]
#[allow(clippy::too_many_arguments)]
fn run<'py>(
    py: Python<'py>,
    algo: &str,
    x: Vec<Vec<f64>>,
    label: Vec<i8>,
    feedback_prob: f64,
    seed: u64,
    beta: f64,
    xi: f64,
    reset_two_means: bool,
    theta: f64,
    c1: f64,
    c_neg1: f64,
    g_lo: f64,
    g_hi: f64,
    log_space_threshold: bool,
    gmm_k: usize,
    em_seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let algo = Algo::from_str(algo).map_err(value_err)?;
    let cfg = build_config(
        beta, xi, reset_two_means, theta, c1, c_neg1, g_lo, g_hi,
        log_space_threshold, gmm_k, em_seed,
    )?;
    let stream = build_stream(x, label, feedback_prob, seed)?;
    let dim = stream.first().map(|r| r.x.len()).unwrap_or(1);
    let mut est = build_estimator(algo, dim, &cfg).map_err(value_err)?;
    let outputs = run_detector(&stream, est.as_mut(), &cfg).map_err(value_err)?;

    let dict = PyDict::new(py);
    dict.set_item("t", outputs.iter().map(|o| o.t).collect::<Vec<_>>())?;
    dict.set_item("p_hat", outputs.iter().map(|o| o.p_hat).collect::<Vec<_>>())?;
    dict.set_item("tau", outputs.iter().map(|o| o.tau).collect::<Vec<_>>())?;
    dict.set_item("decision", outputs.iter().map(|o| o.decision).collect::<Vec<_>>())?;
    dict.set_item(
        "true_label",
        outputs.iter().map(|o| o.true_label).collect::<Vec<_>>(),
    )?;
    dict.set_item(
        "log_loss",
        outputs.iter().map(|o| o.log_loss).collect::<Vec<_>>(),
    )?;
    dict.set_item(
        "zero_one",
        outputs.iter().map(|o| o.zero_one).collect::<Vec<_>>(),
    )?;
    dict.set_item("node_count", est.node_count())?;
    Ok(dict)
}

/// Sweep the false-alarm cost grid over one stream with fresh detector
/// state per cost point.
///
/// Returns 100 `(false_alarm_cost, fpr, tpr)` tuples.
#[pyfunction]
#[pyo3(signature = (algo, x, label, *, feedback_prob=1.0, seed=0,
    beta=2.0, xi=0.8, reset_two_means=false, theta=0.5,
    g_lo=0.0, g_hi=1.0, log_space_threshold=false, gmm_k=3, em_seed=0))]
#[allow(clippy::too_many_arguments)]
fn roc_sweep(
    algo: &str,
    x: Vec<Vec<f64>>,
    label: Vec<i8>,
    feedback_prob: f64,
    seed: u64,
    beta: f64,
    xi: f64,
    reset_two_means: bool,
    theta: f64,
    g_lo: f64,
    g_hi: f64,
    log_space_threshold: bool,
    gmm_k: usize,
    em_seed: u64,
) -> PyResult<Vec<(f64, f64, f64)>> {
    let algo = Algo::from_str(algo).map_err(value_err)?;
    let cfg = build_config(
        beta, xi, reset_two_means, theta, 1.0, 0.5, g_lo, g_hi,
        log_space_threshold, gmm_k, em_seed,
    )?;
    let stream = build_stream(x, label, feedback_prob, seed)?;
    let points = itan::eval::roc_sweep(&stream, algo, &cfg).map_err(value_err)?;
    Ok(points
        .iter()
        .map(|p| (p.false_alarm_cost, p.fpr, p.tpr))
        .collect())
}

/// Trapezoidal area under `(fpr, tpr)` points, with the `(0, 0)` and
/// `(1, 1)` corners appended.
#[pyfunction]
fn auc(points: Vec<(f64, f64)>) -> f64 {
    itan::eval::auc(&points)
}

#[pymodule]
fn itan_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(roc_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    Ok(())
}
