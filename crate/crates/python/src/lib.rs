//! Python bindings for configuration, synthetic data, training, evaluation
//! and checkpoint inspection.

use std::path::{Path, PathBuf};

use mlwc::checkpoint::{attgen_tensors, load_checkpoint, save_checkpoint, Checkpoint, StageTag, ATTGEN_PREFIX};
use mlwc::composer::{evaluate, train_attgen};
use mlwc::config::{parse_config, RunConfig};
use mlwc::data::{load_image_dir, synth_generate, write_image_dir, DatasetPair};
use mlwc::pipeline::train_run;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn os_err(e: impl std::fmt::Display) -> PyErr {
    PyOSError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn config_of(text: Option<&str>) -> PyResult<RunConfig> {
    parse_config(text.unwrap_or("")).map_err(value_err)
}

fn load_data(dir: &Path) -> PyResult<DatasetPair> {
    load_image_dir(dir).map_err(os_err)
}

/// Resolved configuration text; defaults fill every unset key.
#[pyfunction]
#[pyo3(signature = (text=None))]
fn resolve_config(text: Option<&str>) -> PyResult<String> {
    Ok(config_of(text)?.to_text())
}

/// Short hash identifying a resolved configuration.
#[pyfunction]
#[pyo3(signature = (text=None))]
fn config_hash(text: Option<&str>) -> PyResult<String> {
    Ok(config_of(text)?.hash())
}

/// Writes the configured synthetic dataset as a Netpbm directory tree and
/// returns the number of images per split.
#[pyfunction]
#[pyo3(signature = (out_dir, config=None))]
fn synth_data<'py>(py: Python<'py>, out_dir: PathBuf, config: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config_of(config)?;
    let pair = synth_generate(&cfg.data).map_err(value_err)?;
    write_image_dir(&pair, &out_dir).map_err(os_err)?;
    let counts = PyDict::new(py);
    counts.set_item("base_train", pair.base_train.len())?;
    counts.set_item("base_test", pair.base_test.len())?;
    counts.set_item("novel_train", pair.novel_train_pool.len())?;
    counts.set_item("novel_test", pair.novel_test.len())?;
    Ok(counts)
}

/// Trains on `data_dir` and writes `out`. With `weight_centric` the
/// stage-1 parameters also go to `<stem>.stage1.ckpt`. Returns the
/// per-epoch log as TSV text.
#[pyfunction]
#[pyo3(signature = (data_dir, out, config=None, weight_centric=true))]
fn train(py: Python<'_>, data_dir: PathBuf, out: PathBuf, config: Option<&str>, weight_centric: bool) -> PyResult<String> {
    let cfg = config_of(config)?;
    let pair = load_data(&data_dir)?;
    let run = py.detach(|| train_run(&cfg, &pair, weight_centric)).map_err(runtime_err)?;
    if weight_centric {
        let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
        let first = Checkpoint::from_network(&run.stage1, None, &cfg, StageTag::One, run.stage1_last_epoch());
        save_checkpoint(&first, &out.with_file_name(format!("{stem}.stage1.ckpt"))).map_err(os_err)?;
        let last = Checkpoint::from_network(run.last(), None, &cfg, StageTag::Two, run.last_epoch());
        save_checkpoint(&last, &out).map_err(os_err)?;
    } else {
        let only = Checkpoint::from_network(&run.stage1, None, &cfg, StageTag::OneOnly, run.last_epoch());
        save_checkpoint(&only, &out).map_err(os_err)?;
    }
    Ok(run.log.to_tsv())
}

/// Trains attention generators for the network in `ckpt` and writes a copy
/// carrying them to `out`.
#[pyfunction]
fn train_attention(py: Python<'_>, ckpt: PathBuf, data_dir: PathBuf, out: PathBuf) -> PyResult<()> {
    let mut stored = load_checkpoint(&ckpt).map_err(os_err)?;
    let cfg = stored.config().map_err(value_err)?;
    let net = stored.network().map_err(value_err)?;
    let pair = load_data(&data_dir)?;
    let set = py
        .detach(|| train_attgen(&net, &pair, cfg.attgen.scope, &cfg.attgen.train))
        .map_err(runtime_err)?;
    stored.tensors.retain(|name, _| !name.starts_with(ATTGEN_PREFIX));
    stored.tensors.extend(attgen_tensors(&set));
    save_checkpoint(&stored, &out).map_err(os_err)
}

/// Few-shot evaluation of `ckpt`. Returns one dict per (metric, shots) row.
#[pyfunction]
#[pyo3(signature = (ckpt, data_dir, shots=None, trials=None, generator=None))]
fn eval<'py>(
    py: Python<'py>,
    ckpt: PathBuf,
    data_dir: PathBuf,
    shots: Option<Vec<usize>>,
    trials: Option<usize>,
    generator: Option<&str>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let stored = load_checkpoint(&ckpt).map_err(os_err)?;
    let mut cfg = stored.config().map_err(value_err)?;
    if let Some(s) = shots {
        cfg.eval.shots = s;
    }
    if let Some(t) = trials {
        cfg.eval.trials = t;
    }
    if let Some(g) = generator {
        cfg.eval.generator = g.parse().map_err(value_err)?;
    }
    cfg.validate().map_err(value_err)?;
    let net = stored.network().map_err(value_err)?;
    let attgen = stored.attgen().map_err(value_err)?;
    let pair = load_data(&data_dir)?;
    let report = py
        .detach(|| evaluate(&net, &pair, attgen.as_ref(), &cfg.eval))
        .map_err(runtime_err)?;
    report
        .rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("metric", r.metric.name())?;
            d.set_item("shots", r.shots)?;
            d.set_item("mean", r.mean)?;
            d.set_item("ci", r.ci)?;
            d.set_item("trials", r.trials)?;
            Ok(d)
        })
        .collect()
}

/// Stage, epoch, configuration and tensor shapes stored in a checkpoint.
#[pyfunction]
fn inspect_checkpoint<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let stored = load_checkpoint(&path).map_err(os_err)?;
    let out = PyDict::new(py);
    out.set_item("stage", stored.meta.stage.to_string())?;
    out.set_item("epoch", stored.meta.epoch)?;
    out.set_item("config_hash", &stored.meta.config_hash)?;
    out.set_item("config", &stored.meta.config)?;
    let shapes = PyDict::new(py);
    for (name, t) in &stored.tensors {
        shapes.set_item(name, t.shape().to_vec())?;
    }
    out.set_item("tensors", shapes)?;
    Ok(out)
}

/// Flat values and shape of one stored tensor.
#[pyfunction]
fn read_tensor(path: PathBuf, name: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
    let stored = load_checkpoint(&path).map_err(os_err)?;
    let t = stored
        .tensors
        .get(name)
        .ok_or_else(|| PyValueError::new_err(format!("no tensor named `{name}`")))?;
    Ok((t.shape().to_vec(), t.data().to_vec()))
}

#[pymodule]
fn pymlwc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(synth_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(train_attention, m)?)?;
    m.add_function(wrap_pyfunction!(eval, m)?)?;
    m.add_function(wrap_pyfunction!(inspect_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(read_tensor, m)?)?;
    Ok(())
}
