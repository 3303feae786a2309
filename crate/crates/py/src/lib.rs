//! Python bindings for `mfr_core`: tensors, embedding sets, trained
//! backbones, schedules, margin logits, sampling, alignment and metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mfr_core::config::RunConfig;
use mfr_core::data::{ManifestRecord, SamplerConfig};
use mfr_core::eval;
use mfr_core::loss::{margin_logits as core_margin_logits, softmax_cross_entropy as core_ce, LossFamily, MarginConfig};
use mfr_core::nn::{Backbone, DropBlockConfig};
use mfr_core::optim::{lr_at, ScheduleConfig};
use mfr_core::tensor::{self as core_tensor, Tape};
use mfr_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Index(_) => PyIndexError::new_err(e.to_string()),
        Error::Graph(_) | Error::State(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for mfr_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

/// Dense row-major f32 tensor.
#[pyclass(name = "Tensor", module = "mfr_py", skip_from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: core_tensor::Tensor<f32>,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        Ok(Self {
            inner: core_tensor::Tensor::new(&shape, data).py()?,
        })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Self {
            inner: core_tensor::Tensor::zeros(&shape),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.clone().reshape(&shape).py()?,
        })
    }

    fn space_to_depth(&self) -> PyResult<Self> {
        Ok(Self {
            inner: core_tensor::space_to_depth_values(&self.inner).py()?,
        })
    }

    fn depth_to_space(&self) -> PyResult<Self> {
        Ok(Self {
            inner: core_tensor::depth_to_space_values(&self.inner).py()?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.numel()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Keyed fixed-dimension embeddings.
#[pyclass(name = "EmbeddingSet", module = "mfr_py", skip_from_py_object)]
#[derive(Clone)]
struct PyEmbeddingSet {
    inner: eval::EmbeddingSet,
}

#[pymethods]
impl PyEmbeddingSet {
    #[new]
    fn new(dim: usize) -> PyResult<Self> {
        Ok(Self {
            inner: eval::EmbeddingSet::new(dim).py()?,
        })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: eval::EmbeddingSet::read(path).py()?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(path).py()
    }

    fn push(&mut self, key: String, vector: Vec<f32>) -> PyResult<()> {
        self.inner.push(key, &vector).py()
    }

    fn get(&self, key: &str) -> Option<Vec<f32>> {
        self.inner.get(key).map(<[f32]>::to_vec)
    }

    fn keys(&self) -> Vec<String> {
        self.inner.keys().to_vec()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __contains__(&self, key: &str) -> bool {
        self.inner.contains(key)
    }

    /// `[a ‖ b]` per key, each part L2-normalised when `normalize_parts`.
    #[pyo3(signature = (other, normalize_parts = true))]
    fn concat(&self, other: &Self, normalize_parts: bool) -> PyResult<Self> {
        Ok(Self {
            inner: eval::concat_features(&self.inner, &other.inner, normalize_parts).py()?,
        })
    }
}

/// Backbone with trained weights, for eval-mode embedding.
#[pyclass(name = "Model", module = "mfr_py")]
struct PyModel {
    model: Backbone,
    store: core_tensor::ParamStore<f32>,
}

#[pymethods]
impl PyModel {
    /// Loads `checkpoint` into the backbone described by `config` (a config
    /// file; the toy defaults when omitted).
    #[staticmethod]
    #[pyo3(signature = (checkpoint, config = None))]
    fn load(checkpoint: PathBuf, config: Option<PathBuf>) -> PyResult<Self> {
        let cfg = match config {
            Some(p) => RunConfig::load(p).py()?,
            None => RunConfig::default(),
        };
        let (model, store) = mfr_core::commands::load_backbone(&cfg, &checkpoint).py()?;
        Ok(Self { model, store })
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Embeddings `[b, 512]` for preprocessed images `[b, 3, 112, 112]`.
    fn embed(&self, py: Python<'_>, images: &PyTensor) -> PyResult<PyTensor> {
        let images = images.inner.clone();
        let out = py.detach(|| self.model.embed(&self.store, images)).py()?;
        Ok(PyTensor { inner: out })
    }
}

/// Warmup, cosine decay and cosine restarts, indexed by global step.
#[pyclass(name = "Schedule", module = "mfr_py")]
struct PySchedule {
    inner: ScheduleConfig,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (steps_per_epoch, base_lr = 0.1, warmup_epochs = 0.1, decay_epochs = 16.0, total_epochs = 24.0, lr_min = 1e-5, restart_peak = 0.01, restart_len = 4.0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        steps_per_epoch: usize,
        base_lr: f64,
        warmup_epochs: f64,
        decay_epochs: f64,
        total_epochs: f64,
        lr_min: f64,
        restart_peak: f64,
        restart_len: f64,
    ) -> PyResult<Self> {
        let inner = ScheduleConfig {
            base_lr,
            warmup_epochs,
            decay_epochs,
            total_epochs,
            lr_min,
            steps_per_epoch,
            restart_peak,
            restart_len,
        };
        inner.validate().py()?;
        Ok(Self { inner })
    }

    fn lr_at(&self, step: usize) -> PyResult<f64> {
        lr_at(step, &self.inner).py()
    }

    #[getter]
    fn total_steps(&self) -> usize {
        self.inner.total_steps()
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<core_tensor::Tensor<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged rows"));
    }
    core_tensor::Tensor::new(&[rows.len(), cols], rows.concat()).py()
}

fn rows(t: &core_tensor::Tensor<f64>) -> Vec<Vec<f64>> {
    let cols = t.shape()[1];
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

/// Margin-adjusted logits for a `[b, classes]` matrix of cosines.
#[pyfunction]
#[pyo3(signature = (cosines, labels, family, scale, margin = None))]
fn margin_logits(cosines: Vec<Vec<f64>>, labels: Vec<usize>, family: &str, scale: f64, margin: Option<f64>) -> PyResult<Vec<Vec<f64>>> {
    let family: LossFamily = family.parse().py()?;
    let c = matrix(&cosines)?;
    let cfg = MarginConfig {
        s: scale,
        m: margin.unwrap_or(family.default_margin()),
        ..MarginConfig::new(family, c.shape()[1])
    };
    let mut tape = Tape::new();
    let cv = tape.constant(c);
    let y = core_margin_logits(&mut tape, cv, &labels, &cfg).py()?;
    Ok(rows(tape.value(y).py()?))
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
#[pyfunction]
fn softmax_cross_entropy(logits: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let z = tape.leaf(matrix(&logits)?.with_requires_grad(true));
    let loss = core_ce(&mut tape, z, &labels).py()?;
    let value = tape.value(loss).py()?.item().py()?;
    let grads = tape.backward(loss).py()?;
    let g = grads.get(z).ok_or_else(|| PyRuntimeError::new_err("no gradient for logits"))?;
    let shape = tape.value(z).py()?.shape().to_vec();
    Ok((value, g.chunks(shape[1]).map(<[f64]>::to_vec).collect()))
}

/// `(far_target, threshold, tar, far)` per target.
#[pyfunction]
fn tar_at_far(scores: Vec<f64>, genuine: Vec<bool>, far_targets: Vec<f64>) -> PyResult<Vec<(f64, f64, f64, f64)>> {
    Ok(eval::tar_at_far(&scores, &genuine, &far_targets)
        .py()?
        .into_iter()
        .map(|p| (p.far_target, p.threshold, p.tar, p.far))
        .collect())
}

#[pyfunction]
fn weighted_mfr(old_masked: f64, sfr: f64) -> PyResult<f64> {
    eval::weighted_mfr(old_masked, sfr).py()
}

#[pyfunction]
fn cosine(a: Vec<f32>, b: Vec<f32>) -> f64 {
    eval::cosine(&a, &b)
}

/// Least-squares similarity `(a, b, tx, ty)` mapping `src` onto `dst`.
#[pyfunction]
fn estimate_similarity(src: Vec<(f64, f64)>, dst: Vec<(f64, f64)>) -> PyResult<(f64, f64, f64, f64)> {
    let t = mfr_core::data::estimate_similarity(&src, &dst).py()?;
    Ok((t.a, t.b, t.tx, t.ty))
}

/// Epoch plan over records given only their masked flags.
#[pyfunction]
#[pyo3(signature = (masked, mask_ratio_cap = 0.1, seed = 0, shuffle = true))]
fn plan_epoch(masked: Vec<bool>, mask_ratio_cap: f64, seed: u64, shuffle: bool) -> PyResult<Vec<usize>> {
    let records: Vec<ManifestRecord> = masked
        .iter()
        .enumerate()
        .map(|(i, &m)| ManifestRecord {
            path: i.to_string(),
            identity: 0,
            masked: m,
            landmarks: [(0.0, 0.0); 5],
        })
        .collect();
    let cfg = SamplerConfig {
        mask_ratio_cap,
        seed,
        shuffle,
    };
    mfr_core::data::plan_epoch(&records, &cfg).py()
}

/// DropBlock keep-mask for a `[b, c, h, w]` activation; `False` is dropped.
#[pyfunction]
#[pyo3(signature = (shape, drop_prob = 0.1, block_size = 3, seed = 0))]
fn dropblock_mask(shape: (usize, usize, usize, usize), drop_prob: f64, block_size: usize, seed: u64) -> PyResult<Vec<bool>> {
    let cfg = DropBlockConfig { drop_prob, block_size };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mfr_core::nn::dropblock_mask(&cfg, shape, &mut rng).py()
}

#[pymodule]
fn mfr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyEmbeddingSet>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PySchedule>()?;
    m.add_function(wrap_pyfunction!(margin_logits, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(tar_at_far, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_mfr, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(plan_epoch, m)?)?;
    m.add_function(wrap_pyfunction!(dropblock_mask, m)?)?;
    Ok(())
}
