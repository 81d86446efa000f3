//! Python bindings: dataset generation, label export, training, evaluation and
//! prediction over the on-disk layout, plus the pure label and metric helpers.

use std::path::PathBuf;

use msformer_core::config::OptimConfig;
use msformer_core::data::{self, Grid};
use msformer_core::metrics::{self, ConfusionCounts, MetricsReport};
use msformer_core::model::MsFormer;
use msformer_core::nn::ParamStore;
use msformer_core::optim;
use msformer_core::runner::train::final_checkpoint_path;
use msformer_core::runner::{self, Checkpoint, Trainer};
use msformer_core::{Error, TrainConfig};
use pyo3::exceptions::{PyFileNotFoundError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

pub fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::MissingFile(p) => PyFileNotFoundError::new_err(p.display().to_string()),
        Error::Io(_) | Error::File { .. } | Error::Image(_) => PyOSError::new_err(e.to_string()),
        Error::NonFinite(_) | Error::Checkpoint(_) => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn report_dict<'py>(py: Python<'py>, r: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("kappa", r.kappa)?;
    d.set_item("iou", r.iou)?;
    d.set_item("f1", r.f1)?;
    d.set_item("recall", r.recall)?;
    d.set_item("precision", r.precision)?;
    d.set_item("overall_accuracy", r.overall_accuracy)?;
    d.set_item("tp", r.counts.tp)?;
    d.set_item("fp", r.counts.fp)?;
    d.set_item("fn", r.counts.fn_)?;
    d.set_item("tn", r.counts.tn)?;
    d.set_item("degenerate", r.degenerate.clone())?;
    d.set_item("patch_h", r.patch_h)?;
    d.set_item("patch_w", r.patch_w)?;
    d.set_item("checkpoint", r.checkpoint.clone())?;
    Ok(d)
}

fn mask_from_rows(rows: Vec<Vec<u8>>) -> PyResult<data::BinaryMask> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("mask rows have different lengths"));
    }
    Grid::new(h, w, rows.into_iter().flatten().collect()).map_err(to_py_err)
}

fn rows_of<T: Copy>(g: &Grid<T>) -> Vec<Vec<T>> {
    g.data().chunks(g.width().max(1)).map(<[T]>::to_vec).collect()
}

fn load_model(checkpoint: &std::path::Path, threshold: Option<f64>) -> Result<(TrainConfig, MsFormer, ParamStore<f32>), Error> {
    let ckpt = Checkpoint::<f32>::load(checkpoint)?;
    let mut cfg = ckpt.header.config.clone();
    if let Some(t) = threshold {
        cfg.threshold = t;
    }
    cfg.validate()?;
    let (model, mut store) = MsFormer::new(&cfg.model, &cfg.ablation, cfg.seed)?;
    ckpt.restore_params(&mut store)?;
    Ok((cfg, model, store))
}

/// Default training configuration as TOML.
#[pyfunction]
pub fn default_config() -> PyResult<String> {
    TrainConfig::default().to_toml().map_err(to_py_err)
}

/// Writes a synthetic change dataset (80 % train, 20 % test) under `out_dir`.
#[pyfunction]
#[pyo3(signature = (out_dir, n=200, size=64, seed=0))]
pub fn synth_dataset(py: Python<'_>, out_dir: PathBuf, n: usize, size: usize, seed: u64) -> PyResult<()> {
    py.detach(|| data::synth_dataset(&out_dir, n, size, seed)).map_err(to_py_err)
}

/// Exports square patch labels for one split; returns the output directory.
#[pyfunction]
#[pyo3(signature = (root, patch_size, split="train"))]
pub fn prepare_labels(root: PathBuf, patch_size: usize, split: &str) -> PyResult<String> {
    let dir = data::export_patch_labels(&root, split, patch_size, patch_size).map_err(to_py_err)?;
    Ok(dir.display().to_string())
}

/// Per-patch labels of a 0/1 mask given as a list of rows.
#[pyfunction]
pub fn generate_patch_labels(mask: Vec<Vec<u8>>, patch_h: usize, patch_w: usize) -> PyResult<Vec<Vec<u32>>> {
    let labels = data::generate_patch_labels(&mask_from_rows(mask)?, patch_h, patch_w).map_err(to_py_err)?;
    Ok(rows_of(&labels.grid.map(u32::from)))
}

#[pyfunction]
pub fn compute_metrics<'py>(py: Python<'py>, tp: u64, fp: u64, fn_: u64, tn: u64) -> PyResult<Bound<'py, PyDict>> {
    let r = metrics::compute_metrics(&ConfusionCounts { tp, fp, fn_, tn }).map_err(to_py_err)?;
    report_dict(py, &r)
}

#[pyfunction]
#[pyo3(signature = (cur, lr0=0.0005, power=0.9, max_iteration=40000))]
pub fn poly_lr(cur: u64, lr0: f64, power: f64, max_iteration: u64) -> PyResult<f64> {
    let cfg = OptimConfig { lr0, power, max_iteration, ..OptimConfig::default() };
    optim::poly_lr(cur, &cfg).map_err(to_py_err)
}

/// Trains on `root/train` and returns the final checkpoint path. `config` is a
/// TOML string; `max_iteration` overrides its schedule length.
#[pyfunction]
#[pyo3(signature = (root, out_dir, config=None, max_iteration=None, resume=None))]
pub fn train(
    py: Python<'_>,
    root: PathBuf,
    out_dir: PathBuf,
    config: Option<&str>,
    max_iteration: Option<u64>,
    resume: Option<PathBuf>,
) -> PyResult<String> {
    let mut cfg = match config {
        Some(text) => TrainConfig::from_toml(text).map_err(to_py_err)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = max_iteration {
        cfg.optim.max_iteration = m;
    }
    cfg.validate().map_err(to_py_err)?;
    py.detach(move || -> Result<String, Error> {
        let samples = data::load_dataset(&root, "train")?;
        let mut trainer = match &resume {
            Some(path) => Trainer::resume(cfg.clone(), &Checkpoint::load(path)?, samples)?,
            None => Trainer::new(cfg.clone(), samples)?,
        };
        std::fs::create_dir_all(&out_dir)?;
        std::fs::write(out_dir.join("config.toml"), cfg.to_toml()?)?;
        trainer.run(cfg.optim.max_iteration, Some(&out_dir))?;
        Ok(final_checkpoint_path(&out_dir).display().to_string())
    })
    .map_err(to_py_err)
}

/// Scores a checkpoint on a labelled split.
#[pyfunction]
#[pyo3(signature = (checkpoint, root, split="test", threshold=None))]
pub fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    root: PathBuf,
    split: &str,
    threshold: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let split = split.to_string();
    let report = py
        .detach(move || -> Result<MetricsReport, Error> {
            let (cfg, model, store) = load_model(&checkpoint, threshold)?;
            let samples = data::load_dataset(&root, &split)?;
            let mut r = runner::evaluate(&model, &store, &cfg, &samples, false)?;
            r.checkpoint = Some(checkpoint.display().to_string());
            Ok(r)
        })
        .map_err(to_py_err)?;
    report_dict(py, &report)
}

/// Change probabilities for every pair of a split as `(id, rows)`.
#[pyfunction]
#[pyo3(signature = (checkpoint, root, split="test"))]
pub fn predict(py: Python<'_>, checkpoint: PathBuf, root: PathBuf, split: &str) -> PyResult<Vec<(String, Vec<Vec<f64>>)>> {
    let split = split.to_string();
    py.detach(move || -> Result<_, Error> {
        let (cfg, model, store) = load_model(&checkpoint, None)?;
        let samples = data::load_dataset(&root, &split)?;
        let maps = runner::predict_maps(&model, &store, &cfg, &samples)?;
        Ok(samples.into_iter().zip(maps).map(|(s, m)| (s.id, rows_of(m.values()))).collect())
    })
    .map_err(to_py_err)
}

#[pymodule]
mod msformer {
    #[pymodule_export]
    use super::{
        compute_metrics, default_config, evaluate, generate_patch_labels, poly_lr, predict, prepare_labels,
        synth_dataset, train,
    };
}
