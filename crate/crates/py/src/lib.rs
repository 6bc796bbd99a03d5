//! Python bindings: data generation, training, evaluation and the partition
//! and cost helpers.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use skateformer::attention::{count_flops, FlopsConfig};
use skateformer::model::{temporal_embedding as te, Checkpoint as CoreCheckpoint};
use skateformer::partition::{LayoutKind, PartitionLayout, SkateType};
use skateformer::skeldata::{self, Dataset, ModalityKind, SyntheticSpec};
use skateformer::trainer;
use skateformer::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Numeric(_) => PyArithmeticError::new_err(e.to_string()),
        Error::Io(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn skate_type(ty: usize) -> PyResult<SkateType> {
    SkateType::ALL
        .get(ty.wrapping_sub(1))
        .copied()
        .ok_or_else(|| PyValueError::new_err(format!("skate type must be 1..=4, got {ty}")))
}

fn layout_kind(name: &str) -> PyResult<LayoutKind> {
    match name {
        "ntu" => Ok(LayoutKind::NtuLike),
        "nwucla" => Ok(LayoutKind::NwuclaLike),
        _ => Err(PyValueError::new_err(format!("unknown layout {name:?} (ntu, nwucla)"))),
    }
}

/// Attention cost of full vs partitioned attention.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn flops<'py>(py: Python<'py>, v: u64, t: u64, c: u64, k: u64, l: u64, m: u64, n: u64) -> PyResult<Bound<'py, PyDict>> {
    let rep = count_flops(&FlopsConfig { v, t, c, k, l, m, n }).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("naive_macs", rep.naive_macs)?;
    d.set_item("skate_macs", rep.skate_macs)?;
    d.set_item("per_type_macs", rep.per_type_macs.to_vec())?;
    d.set_item("ratio", rep.ratio_f64())?;
    d.set_item("ratio_exact", (*rep.ratio.numer(), *rep.ratio.denom()))?;
    Ok(d)
}

/// Write a synthetic dataset to `out`; returns the number of sequences.
#[pyfunction]
#[pyo3(signature = (out, classes=4, per_class=32, seed=1, noise=0.01))]
fn gen_data(out: PathBuf, classes: usize, per_class: usize, seed: u64, noise: f64) -> PyResult<usize> {
    let spec = SyntheticSpec { classes, per_class, noise_sigma: noise, ..SyntheticSpec::default() };
    let ds = skeldata::generate_synthetic(&spec, seed).map_err(py_err)?;
    ds.save(&out).map_err(py_err)?;
    Ok(ds.len())
}

/// Sinusoidal embedding of normalised frame positions, row-major `[len, c]`.
#[pyfunction]
fn temporal_embedding(t_norm: Vec<f64>, c: usize) -> Vec<f64> {
    te(&t_norm, c)
}

/// `(blocks, t', v')` of one Skate-Type partition for a built-in layout.
#[pyfunction]
fn partition_dims(layout: &str, t: usize, n: usize, skate_type: usize) -> PyResult<(usize, usize, usize)> {
    let l = PartitionLayout::build(layout_kind(layout)?, t, n).map_err(py_err)?;
    Ok(l.partition_dims(self::skate_type(skate_type)?))
}

/// Block and in-block position of token `(t, v)`.
#[pyfunction]
fn token_block(layout: &str, t_frames: usize, n: usize, skate_type: usize, t: usize, v: usize) -> PyResult<(usize, usize, usize)> {
    let l = PartitionLayout::build(layout_kind(layout)?, t_frames, n).map_err(py_err)?;
    if t >= l.t() || v >= l.v() {
        return Err(PyValueError::new_err(format!("token ({t}, {v}) outside {}x{}", l.t(), l.v())));
    }
    Ok(l.token_block(self::skate_type(skate_type)?, t, v))
}

/// Train from a run config file. Returns a summary dict.
#[pyfunction]
#[pyo3(signature = (config, modality=None, out=None))]
fn train<'py>(py: Python<'py>, config: PathBuf, modality: Option<&str>, out: Option<PathBuf>) -> PyResult<Bound<'py, PyDict>> {
    let modality = modality.map(|m| m.parse::<ModalityKind>()).transpose().map_err(py_err)?;
    let run = skateformer::cli::load_run(&config, modality, out).map_err(py_err)?;
    let tr = Dataset::load(&run.train_data).map_err(py_err)?;
    let ev = Dataset::load(&run.eval_data).map_err(py_err)?;
    let s = py.detach(|| trainer::fit(&run, &tr, &ev, &run.out_dir, |_| {})).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("best_acc", s.best_acc)?;
    d.set_item("best_epoch", s.best_epoch)?;
    d.set_item("num_params", s.num_params)?;
    d.set_item("metrics_path", s.metrics_path)?;
    d.set_item("checkpoint_path", s.checkpoint_path)?;
    d.set_item("eval_acc", s.history.iter().map(|m| m.eval_acc).collect::<Vec<_>>())?;
    Ok(d)
}

type InspectRow = (usize, String, [f64; 4], f64);

/// A trained model read from disk.
#[pyclass(frozen)]
struct Checkpoint {
    inner: CoreCheckpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: CoreCheckpoint::load(&path).map_err(py_err)? })
    }

    #[getter]
    fn modality(&self) -> String {
        self.inner.modality.to_string()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.config.num_classes
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.params.num_learnable()
    }

    fn config_text(&self) -> String {
        self.inner.config.to_text()
    }

    /// `(loss, accuracy)` on a dataset directory.
    fn evaluate(&self, py: Python<'_>, data: PathBuf) -> PyResult<(f64, f64)> {
        let ds = Dataset::load(&data).map_err(py_err)?;
        let ck = &self.inner;
        let r = py.detach(|| trainer::evaluate(&ck.params, &ck.config, &ds, ck.modality)).map_err(py_err)?;
        Ok((r.loss, r.accuracy))
    }

    /// Class probabilities for every sequence of a dataset directory.
    fn predict(&self, py: Python<'_>, data: PathBuf) -> PyResult<Vec<Vec<f64>>> {
        let ds = Dataset::load(&data).map_err(py_err)?;
        let ck = &self.inner;
        let r = py.detach(|| trainer::evaluate(&ck.params, &ck.config, &ds, ck.modality)).map_err(py_err)?;
        Ok(r.probs)
    }

    /// Per-class mean importance of the four branches, plus accuracy.
    fn inspect(&self, py: Python<'_>, data: PathBuf) -> PyResult<Vec<InspectRow>> {
        let ds = Dataset::load(&data).map_err(py_err)?;
        let rows = py.detach(|| trainer::inspect(&self.inner, &ds)).map_err(py_err)?;
        Ok(rows.into_iter().map(|r| (r.class, r.name, r.scores, r.accuracy)).collect())
    }
}

#[pymodule]
fn skateformer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(flops, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(temporal_embedding, m)?)?;
    m.add_function(wrap_pyfunction!(partition_dims, m)?)?;
    m.add_function(wrap_pyfunction!(token_block, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<Checkpoint>()?;
    Ok(())
}
