//! Python bindings for the pruning and distillation toolkit.
//!
//! The module mirrors the pipeline's main types and operations: datasets
//! (synthetic or IDX), residual networks with training and evaluation,
//! pruning plans, surgery, and the two-step recovery. Images cross the
//! boundary as flat `float` lists in NCHW order; everything heavy stays in
//! Rust.

use std::path::Path;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use resprune_core::augment;
use resprune_core::data;
use resprune_core::distill;
use resprune_core::error::Error;
use resprune_core::nn::{NetConfig, NetworkGraph};
use resprune_core::prune;
use resprune_core::tensor::Tensor;
use resprune_core::train;

/// Maps crate errors onto the Python exception hierarchy: bad arguments and
/// configs raise `ValueError`, file trouble raises `IOError`, everything
/// else raises `RuntimeError`.
fn py_err(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) | Error::ShapeMismatch { .. } => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io { .. } | Error::Corrupt { .. } => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

// ---------------------------------------------------------------------------
// Dataset

/// Labeled image set with per-channel normalization statistics.
#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Renders the deterministic synthetic classification set.
    #[staticmethod]
    #[pyo3(signature = (class_count, per_class, side, seed=0))]
    fn synthetic(class_count: usize, per_class: usize, side: usize, seed: u64) -> PyResult<Self> {
        let spec = data::SyntheticSpec { class_count, per_class, side, seed };
        Ok(PyDataset { inner: data::make_synthetic(&spec).map_err(py_err)? })
    }

    /// Reads an IDX image/label file pair.
    #[staticmethod]
    fn load_idx(images: &str, labels: &str) -> PyResult<Self> {
        let ds = data::load_idx(Path::new(images), Path::new(labels)).map_err(py_err)?;
        Ok(PyDataset { inner: ds })
    }

    /// Writes the records as an IDX image/label file pair.
    fn save_idx(&self, images: &str, labels: &str) -> PyResult<()> {
        data::store_idx(&self.inner, Path::new(images), Path::new(labels)).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn class_count(&self) -> usize {
        self.inner.class_count()
    }

    fn labels(&self) -> Vec<u32> {
        self.inner.labels().to_vec()
    }

    /// Splits off `eval_count` records, returning `(train, eval)`.
    fn split(&self, eval_count: usize, seed: u64) -> PyResult<(PyDataset, PyDataset)> {
        let (train, eval) = self.inner.split(eval_count, seed).map_err(py_err)?;
        Ok((PyDataset { inner: train }, PyDataset { inner: eval }))
    }

    /// New dataset from the given record indices; stats carry over.
    fn subset(&self, indices: Vec<usize>, tag: &str) -> PyResult<PyDataset> {
        Ok(PyDataset { inner: self.inner.subset(&indices, tag).map_err(py_err)? })
    }

    /// Computes normalization statistics from this dataset's own pixels.
    fn compute_stats(&mut self) {
        self.inner.compute_stats();
    }

    /// `(mean, std)` per channel.
    fn stats(&self) -> (Vec<f32>, Vec<f32>) {
        let (m, s) = self.inner.stats();
        (m.to_vec(), s.to_vec())
    }

    /// Adopts another dataset's normalization statistics.
    fn set_stats(&mut self, mean: Vec<f32>, std: Vec<f32>) -> PyResult<()> {
        self.inner.set_stats(&mean, &std).map_err(py_err)
    }

    /// Expands the set exactly six-fold. Returns the expanded dataset and
    /// per-record provenance as `(transform_name, source_index)` pairs.
    fn expand(&self, seed: u64) -> PyResult<(PyDataset, Vec<(String, usize)>)> {
        let out = augment::expand_dataset(&self.inner, seed).map_err(py_err)?;
        let prov = out
            .provenance
            .iter()
            .map(|p| (p.transform.to_string(), p.source))
            .collect();
        Ok((PyDataset { inner: out.data }, prov))
    }

    fn images_sha256(&self) -> String {
        self.inner.images_sha256()
    }

    fn labels_sha256(&self) -> String {
        self.inner.labels_sha256()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset({} records, {} classes)",
            self.inner.len(),
            self.inner.class_count()
        )
    }
}

// ---------------------------------------------------------------------------
// Net

/// Residual network with training, evaluation, and checkpoint I/O.
#[pyclass(name = "Net")]
struct PyNet {
    inner: NetworkGraph<f32>,
}

#[pymethods]
impl PyNet {
    /// Builds a freshly initialized network.
    #[new]
    #[pyo3(signature = (input_side, in_channels, class_count, widths, blocks, depthwise=false, seed=0))]
    fn new(
        input_side: usize,
        in_channels: usize,
        class_count: usize,
        widths: Vec<usize>,
        blocks: Vec<usize>,
        depthwise: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = NetConfig { input_side, in_channels, class_count, widths, blocks, depthwise };
        let spec = cfg.spec().map_err(py_err)?;
        Ok(PyNet { inner: NetworkGraph::from_spec(&spec, seed).map_err(py_err)? })
    }

    /// The small reference configuration used throughout the test suites.
    #[staticmethod]
    #[pyo3(signature = (seed=0))]
    fn desk(seed: u64) -> PyResult<Self> {
        let spec = NetConfig::desk().spec().map_err(py_err)?;
        Ok(PyNet { inner: NetworkGraph::from_spec(&spec, seed).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyNet { inner: NetworkGraph::load(Path::new(path)).map_err(py_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(Path::new(path)).map_err(py_err)
    }

    /// Stage output widths after any surgery.
    #[getter]
    fn widths(&self) -> Vec<usize> {
        self.inner.spec().stages.iter().map(|s| s.width).collect()
    }

    #[getter]
    fn class_count(&self) -> usize {
        self.inner.class_count()
    }

    /// `(macs, params)` for one input image.
    fn macs_params(&self) -> (u64, u64) {
        prune::count_macs_params(&self.inner)
    }

    /// Eval-mode logits for `n` images given as one flat NCHW list.
    fn forward(&self, images: Vec<f32>, n: usize) -> PyResult<Vec<f32>> {
        let spec = self.inner.spec();
        let expected = n * spec.in_channels * spec.input_side * spec.input_side;
        if images.len() != expected {
            return Err(PyValueError::new_err(format!(
                "{} pixels for {n} images, expected {expected}",
                images.len()
            )));
        }
        let x = Tensor::from_vec(
            images,
            &[n, spec.in_channels, spec.input_side, spec.input_side],
        )
        .map_err(py_err)?;
        Ok(self.inner.forward_eval(&x).map_err(py_err)?.data().to_vec())
    }

    /// Supervised training with momentum SGD, warmup, and optional mixup.
    #[pyo3(signature = (data, eval=None, epochs=30, batch_size=32, lr=0.01, momentum=0.9,
                        weight_decay=0.0, warmup_epochs=5, mixup_alpha=None, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        data: PyRef<PyDataset>,
        eval: Option<PyRef<PyDataset>>,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
        warmup_epochs: usize,
        mixup_alpha: Option<f64>,
        seed: u64,
    ) -> PyResult<()> {
        let cfg = train::TrainConfig {
            epochs,
            batch_size,
            lr,
            momentum,
            weight_decay,
            warmup_epochs,
            mixup_alpha,
            seed,
        };
        let mut log = train::MetricsLog::in_memory();
        train::train_teacher(
            &mut self.inner,
            &data.inner,
            eval.as_deref().map(|d| &d.inner),
            &cfg,
            &mut log,
        )
        .map_err(py_err)
    }

    /// Top-1 accuracy over a dataset, as a fraction.
    #[pyo3(signature = (data, batch_size=32))]
    fn evaluate(&self, data: PyRef<PyDataset>, batch_size: usize) -> PyResult<f64> {
        train::evaluate(&self.inner, &data.inner, batch_size).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let (macs, params) = prune::count_macs_params(&self.inner);
        format!(
            "Net(widths={:?}, classes={}, macs={macs}, params={params})",
            self.widths(),
            self.inner.class_count()
        )
    }
}

// ---------------------------------------------------------------------------
// Plan

/// Scored removal selection over a network's coupled channel groups.
#[pyclass(name = "Plan")]
struct PyPlan {
    inner: prune::PruningPlan,
    /// Explanation when the target could not be met under the floors.
    #[pyo3(get)]
    shortfall: Option<String>,
}

#[pymethods]
impl PyPlan {
    /// Parses the canonical plan text format.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(PyPlan { inner: prune::PruningPlan::from_text(text).map_err(py_err)?, shortfall: None })
    }

    /// The canonical byte-stable text form.
    fn text(&self) -> String {
        self.inner.to_text()
    }

    /// Group ids marked for removal, ascending.
    fn removed(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.inner.removed_ids().into_iter().collect();
        ids.sort_unstable();
        ids
    }

    #[getter]
    fn criterion(&self) -> String {
        self.inner.criterion.to_string()
    }

    fn __repr__(&self) -> String {
        format!(
            "Plan(criterion={}, removed {} of {} groups)",
            self.inner.criterion,
            self.removed().len(),
            self.inner.entries.len()
        )
    }
}

// ---------------------------------------------------------------------------
// Pipeline operations

/// Scores the network's coupled groups and selects removals.
///
/// `criterion` is one of `random`, `weight_sum`, `delta_loss`, `kl`;
/// `target` reads as `macs_ratio 0.6` or `groups 12`. Scoring zeroes groups
/// in place but restores the network bitwise before returning.
#[pyfunction]
#[pyo3(signature = (net, data, criterion="kl", target="macs_ratio 0.6",
                    retention_floor=0.3, proxy_size=256, seed=0))]
fn make_plan(
    net: &mut PyNet,
    data: PyRef<PyDataset>,
    criterion: &str,
    target: &str,
    retention_floor: f64,
    proxy_size: usize,
    seed: u64,
) -> PyResult<PyPlan> {
    let criterion: prune::Criterion = criterion.parse().map_err(py_err)?;
    let target: prune::PruneTarget = target.parse().map_err(py_err)?;
    let groups = prune::discover_groups(&net.inner).map_err(py_err)?;
    let (proxy, digest) = if criterion.needs_proxy() {
        let p = prune::ProxySet::build(&net.inner, &data.inner, proxy_size, seed)
            .map_err(py_err)?;
        let d = p.digest().to_string();
        (Some(p), d)
    } else {
        (None, "none".to_string())
    };
    let scores =
        prune::score_groups(&mut net.inner, &groups, criterion, proxy.as_ref(), seed)
            .map_err(py_err)?;
    let meta = prune::PlanMeta { criterion, seed, proxy_digest: digest };
    let (plan, shortfall) = prune::make_plan(
        &net.inner.spec(),
        &groups,
        &scores,
        target,
        retention_floor,
        &meta,
    )
    .map_err(py_err)?;
    Ok(PyPlan { inner: plan, shortfall: shortfall.map(|s| s.to_string()) })
}

/// Carves the planned channels out, returning the smaller network.
#[pyfunction]
fn apply_plan(net: &PyNet, plan: &PyPlan) -> PyResult<PyNet> {
    Ok(PyNet { inner: prune::apply_surgery(&net.inner, &plan.inner).map_err(py_err)? })
}

/// Two-step recovery: distillation on the original records, then
/// distillation on the six-fold expansion with stored-logit refinement.
#[pyfunction]
#[pyo3(signature = (student, teacher, data, eval=None, step1_epochs=25, step2_epochs=2,
                    step1_lr=0.01, step2_lr=1e-4, warmup_epochs=5, batch_size=32,
                    momentum=0.9, weight_decay=0.0, mixup_alpha=1.0,
                    temperature1=2.0, temperature2=1.0, alpha=0.7, eta=1.0,
                    expand=true, seed=0))]
#[allow(clippy::too_many_arguments)]
fn finetune(
    student: &mut PyNet,
    teacher: PyRef<PyNet>,
    data: PyRef<PyDataset>,
    eval: Option<PyRef<PyDataset>>,
    step1_epochs: usize,
    step2_epochs: usize,
    step1_lr: f64,
    step2_lr: f64,
    warmup_epochs: usize,
    batch_size: usize,
    momentum: f64,
    weight_decay: f64,
    mixup_alpha: f64,
    temperature1: f64,
    temperature2: f64,
    alpha: f64,
    eta: f64,
    expand: bool,
    seed: u64,
) -> PyResult<()> {
    let mut step1 = distill::DistillConfig::step1();
    step1.temperature = temperature1;
    step1.alpha = alpha;
    let mut step2 = distill::DistillConfig::step2();
    step2.temperature = temperature2;
    step2.alpha = alpha;
    let cfg = distill::FinetuneConfig {
        step1,
        step2,
        step1_epochs,
        step2_epochs,
        step1_lr,
        step2_lr,
        warmup_epochs,
        batch_size,
        momentum,
        weight_decay,
        mixup_alpha,
        eta,
        expand,
        seed,
    };
    let mut log = train::MetricsLog::in_memory();
    distill::finetune(
        &mut student.inner,
        &teacher.inner,
        &data.inner,
        eval.as_deref().map(|d| &d.inner),
        &cfg,
        &mut log,
        None,
    )
    .map_err(py_err)?;
    Ok(())
}

#[pymodule]
fn resprune_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyNet>()?;
    m.add_class::<PyPlan>()?;
    m.add_function(wrap_pyfunction!(make_plan, m)?)?;
    m.add_function(wrap_pyfunction!(apply_plan, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
