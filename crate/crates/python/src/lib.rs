//! Python bindings: dataset generation, pre-training, evaluation and the
//! loss primitives, taking plain lists and paths.

use std::path::Path;

use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use capc::checkpoint::Checkpoint;
use capc::config::RunConfig;
use capc::csi::read_dataset;
use capc::eval::{linear_eval, semi_supervised_eval, EvalConfig};
use capc::model::Encoder;
use capc::optim::CosineSchedule;
use capc::synth::{gen_dataset, SynthParams};
use capc::{diagnose, loss, train, CapcError};

fn py_err(e: CapcError) -> PyErr {
    match e {
        CapcError::Io { .. } | CapcError::Load { .. } => PyIOError::new_err(e.to_string()),
        CapcError::NonFinite { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

fn trained_encoder(checkpoint: &str) -> PyResult<Encoder<f32>> {
    Ok(Checkpoint::load(Path::new(checkpoint)).map_err(py_err)?.model.encoder().clone())
}

/// Writes a paired synthetic dataset to `out`; returns the sample count.
#[pyfunction]
#[pyo3(signature = (out, seed=0, links=3, subcarriers=30, frames=200, classes=8, samples_per_class=50))]
fn generate_dataset(
    py: Python<'_>,
    out: &str,
    seed: u64,
    links: usize,
    subcarriers: usize,
    frames: usize,
    classes: usize,
    samples_per_class: usize,
) -> PyResult<usize> {
    let params = SynthParams {
        seed,
        links,
        subcarriers,
        frames,
        classes,
        samples_per_class,
        ..SynthParams::default()
    };
    py.detach(|| {
        let cfg = params.build()?;
        Ok(gen_dataset(&cfg, Path::new(out))?.len())
    })
    .map_err(py_err)
}

/// Pre-trains from the `[pretrain]` section of an INI run configuration and
/// writes the run directory; returns the mean loss of every epoch.
#[pyfunction]
#[pyo3(signature = (config, out, seed=None))]
fn pretrain(py: Python<'_>, config: &str, out: &str, seed: Option<u64>) -> PyResult<Vec<f64>> {
    py.detach(|| {
        let mut cfg = RunConfig::load(Path::new(config))?;
        if let Some(s) = seed {
            cfg = cfg.with_seed(s);
        }
        let mut ds = read_dataset(&cfg.pretrain.data)?;
        if cfg.pretrain.standardize {
            ds = ds.standardized();
        }
        Ok(train::pretrain(&cfg.pretrain.train, &ds, Some(Path::new(out)))?.epoch_means)
    })
    .map_err(py_err)
}

/// Few-shot linear-probe accuracy of a checkpoint's frozen encoder.
#[pyfunction]
#[pyo3(signature = (checkpoint, data, shots=6, seed=0, epochs=100))]
fn linear_probe(py: Python<'_>, checkpoint: &str, data: &str, shots: usize, seed: u64, epochs: usize) -> PyResult<f64> {
    let enc = trained_encoder(checkpoint)?;
    py.detach(|| {
        let ds = read_dataset(Path::new(data))?;
        let cfg = EvalConfig {
            shots,
            seed,
            epochs,
            ..EvalConfig::linear()
        };
        Ok(linear_eval(&enc, &ds, &cfg)?.accuracy)
    })
    .map_err(py_err)
}

/// Few-shot accuracy after fine-tuning encoder and classifier together.
#[pyfunction]
#[pyo3(signature = (checkpoint, data, shots=6, seed=0, epochs=20))]
fn semi_supervised(py: Python<'_>, checkpoint: &str, data: &str, shots: usize, seed: u64, epochs: usize) -> PyResult<f64> {
    let enc = trained_encoder(checkpoint)?;
    py.detach(|| {
        let ds = read_dataset(Path::new(data))?;
        let cfg = EvalConfig {
            shots,
            seed,
            epochs,
            ..EvalConfig::semi()
        };
        Ok(semi_supervised_eval(&enc, &ds, &cfg)?.0.accuracy)
    })
    .map_err(py_err)
}

/// Descending singular values of the embedding covariance of `batch`
/// samples strided over the dataset.
#[pyfunction]
#[pyo3(signature = (checkpoint, data, batch=128))]
fn diagnose_collapse(py: Python<'_>, checkpoint: &str, data: &str, batch: usize) -> PyResult<Vec<f64>> {
    let enc = trained_encoder(checkpoint)?;
    py.detach(|| {
        let ds = read_dataset(Path::new(data))?;
        diagnose::diagnose_collapse(&enc, &diagnose::validation_batch(&ds, batch))
    })
    .map_err(py_err)
}

/// Writes the embedding container to `out`; returns `(rows, width)`.
#[pyfunction]
fn export_embeddings(py: Python<'_>, checkpoint: &str, data: &str, out: &str) -> PyResult<(usize, usize)> {
    let enc = trained_encoder(checkpoint)?;
    py.detach(|| {
        let ds = read_dataset(Path::new(data))?;
        Ok(diagnose::export_embeddings(&enc, &ds, Path::new(out))?.dim())
    })
    .map_err(py_err)
}

/// Cross-correlation of two `[B, H]` batches after per-column centering.
#[pyfunction]
#[pyo3(signature = (a, b, eps=1e-9))]
fn bt_cross_correlation(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, eps: f64) -> PyResult<Vec<Vec<f64>>> {
    let c = loss::bt_cross_correlation(matrix(a)?.view(), matrix(b)?.view(), eps).map_err(py_err)?;
    Ok(rows(&c))
}

/// Redundancy-reduction loss of a square cross-correlation matrix.
#[pyfunction]
#[pyo3(signature = (c, lam=0.002))]
fn bt_loss(c: Vec<Vec<f64>>, lam: f64) -> PyResult<f64> {
    let c = matrix(c)?;
    if c.nrows() != c.ncols() {
        return Err(PyValueError::new_err("cross-correlation must be square"));
    }
    Ok(loss::bt_loss(c.view(), lam))
}

/// InfoNCE of a `[B, B]` score matrix whose diagonal holds the positives.
#[pyfunction]
fn info_nce(scores: Vec<Vec<f64>>) -> PyResult<f64> {
    let s = matrix(scores)?;
    if s.nrows() != s.ncols() || s.nrows() < 2 {
        return Err(PyValueError::new_err("scores must be square with B >= 2"));
    }
    Ok(loss::info_nce(&s))
}

/// Learning rate of the warmup + cosine schedule at `step`.
#[pyfunction]
fn lr_at(base_lr: f64, warmup_steps: usize, total_steps: usize, step: usize) -> f64 {
    CosineSchedule::new(base_lr, warmup_steps, total_steps).lr_at(step)
}

#[pymodule]
#[pyo3(name = "capc")]
fn capc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(linear_probe, m)?)?;
    m.add_function(wrap_pyfunction!(semi_supervised, m)?)?;
    m.add_function(wrap_pyfunction!(diagnose_collapse, m)?)?;
    m.add_function(wrap_pyfunction!(export_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(bt_cross_correlation, m)?)?;
    m.add_function(wrap_pyfunction!(bt_loss, m)?)?;
    m.add_function(wrap_pyfunction!(info_nce, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    Ok(())
}
