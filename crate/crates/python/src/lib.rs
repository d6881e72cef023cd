//! Python module `cdgc`.
//!
//! Feature maps cross the boundary as flat row-major lists with an explicit
//! `(batch, channels, frames, vertices)` shape; matrices as lists of rows.

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cdgc_core::data::{synth_dataset, derive_stream, StreamKind};
use cdgc_core::graph::{normalized_adjacency, partition};
use cdgc_core::harness::{equivcheck as run_equivcheck, gradcheck as run_gradcheck, EquivOptions, GradScope, TaskOptions};
use cdgc_core::network::{
    fuse_scores as run_fuse, load_checkpoint, save_checkpoint, train_with, AlphaMode, BackboneConfig, Model as CoreModel,
    SpatialOp, TrainConfig, DESK_CHANNELS, FULL_CHANNELS,
};
use cdgc_core::ops::{self, CdgcLayerParams};
use cdgc_core::{Error, FeatureMap, Matrix, Shape, SkeletonGraph as CoreGraph};

type Shape4 = (usize, usize, usize, usize);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_map(data: Vec<f64>, shape: Shape4) -> PyResult<FeatureMap> {
    FeatureMap::new(Shape::new(shape.0, shape.1, shape.2, shape.3), data).map_err(py_err)
}

fn from_map(x: FeatureMap) -> (Vec<f64>, Shape4) {
    let s = x.shape();
    (x.into_vec(), (s.batch, s.channels, s.frames, s.vertices))
}

fn to_matrix(rows: &[Vec<f64>]) -> PyResult<Matrix> {
    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    Matrix::from_rows(&refs).map_err(py_err)
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

#[pyclass(name = "SkeletonGraph", module = "cdgc", from_py_object)]
#[derive(Clone)]
struct PyGraph {
    inner: CoreGraph,
}

#[pymethods]
impl PyGraph {
    #[new]
    fn new(num_vertices: usize, edges: Vec<(usize, usize)>, center: usize) -> PyResult<Self> {
        Ok(Self {
            inner: CoreGraph::new(num_vertices, &edges, center).map_err(py_err)?,
        })
    }

    /// The 25-joint NTU RGB+D skeleton.
    #[staticmethod]
    fn ntu() -> Self {
        Self { inner: CoreGraph::ntu() }
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: CoreGraph::parse(text).map_err(py_err)?,
        })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn num_vertices(&self) -> usize {
        self.inner.num_vertices()
    }

    #[getter]
    fn edges(&self) -> Vec<(usize, usize)> {
        self.inner.edges().to_vec()
    }

    #[getter]
    fn center(&self) -> usize {
        self.inner.center()
    }

    fn __repr__(&self) -> String {
        format!(
            "SkeletonGraph(num_vertices={}, edges={}, center={})",
            self.inner.num_vertices(),
            self.inner.edges().len(),
            self.inner.center()
        )
    }
}

fn graph_layer(
    x: Vec<f64>,
    shape: Shape4,
    graph: &PyGraph,
    weights: Vec<Vec<Vec<f64>>>,
    alpha: f64,
    op: fn(&FeatureMap, &cdgc_core::PartitionedAdjacency, &CdgcLayerParams) -> cdgc_core::Result<FeatureMap>,
) -> PyResult<(Vec<f64>, Shape4)> {
    let x = to_map(x, shape)?;
    let ws = weights.iter().map(|w| to_matrix(w)).collect::<PyResult<Vec<_>>>()?;
    let labeling = partition(&graph.inner).map_err(py_err)?;
    let adj = normalized_adjacency(&graph.inner, &labeling).map_err(py_err)?;
    let y = op(&x, &adj, &CdgcLayerParams::graph(ws, alpha)).map_err(py_err)?;
    Ok(from_map(y))
}

/// `sum_k A_k X W_k` with one weight matrix per partition subset.
#[pyfunction]
fn vanilla_gconv(x: Vec<f64>, shape: Shape4, graph: &PyGraph, weights: Vec<Vec<Vec<f64>>>) -> PyResult<(Vec<f64>, Shape4)> {
    graph_layer(x, shape, graph, weights, 0.0, ops::vanilla_gconv)
}

/// Matrix-form central-difference graph convolution.
#[pyfunction]
fn cdgc_matrix(
    x: Vec<f64>,
    shape: Shape4,
    graph: &PyGraph,
    weights: Vec<Vec<Vec<f64>>>,
    alpha: f64,
) -> PyResult<(Vec<f64>, Shape4)> {
    graph_layer(x, shape, graph, weights, alpha, ops::cdgc_matrix)
}

/// Per-node reference central-difference graph convolution.
#[pyfunction]
fn cdgc_naive(
    x: Vec<f64>,
    shape: Shape4,
    graph: &PyGraph,
    weights: Vec<Vec<Vec<f64>>>,
    alpha: f64,
) -> PyResult<(Vec<f64>, Shape4)> {
    let x = to_map(x, shape)?;
    let ws = weights.iter().map(|w| to_matrix(w)).collect::<PyResult<Vec<_>>>()?;
    let labeling = partition(&graph.inner).map_err(py_err)?;
    let y = ops::cdgc_naive(&x, &graph.inner, &labeling, &CdgcLayerParams::graph(ws, alpha)).map_err(py_err)?;
    Ok(from_map(y))
}

/// Shift-based central-difference convolution with a `V x C_in` mask.
#[pyfunction]
fn accelerated_cdgc(
    x: Vec<f64>,
    shape: Shape4,
    weight: Vec<Vec<f64>>,
    mask: Vec<Vec<f64>>,
    alpha: f64,
) -> PyResult<(Vec<f64>, Shape4)> {
    let x = to_map(x, shape)?;
    let mut params = CdgcLayerParams::shift(to_matrix(&weight)?, shape.3, alpha);
    params.mask = Some(to_matrix(&mask)?);
    Ok(from_map(ops::accelerated_cdgc(&x, &params).map_err(py_err)?))
}

#[pyfunction]
fn spatial_shift(x: Vec<f64>, shape: Shape4) -> PyResult<(Vec<f64>, Shape4)> {
    Ok(from_map(ops::spatial_shift(&to_map(x, shape)?)))
}

#[pyclass(name = "Model", module = "cdgc")]
struct PyModel {
    inner: CoreModel,
    graph: CoreGraph,
}

#[pymethods]
impl PyModel {
    /// `preset` is `desk` or `full`; `alpha` a number in [0, 1], `learnable`
    /// or `learnable:<init>`.
    #[new]
    #[pyo3(signature = (variant="accelerated_cdgc", preset="desk", classes=6, alpha="0.3", seed=0, graph=None))]
    fn new(variant: &str, preset: &str, classes: usize, alpha: &str, seed: u64, graph: Option<PyGraph>) -> PyResult<Self> {
        let graph = graph.map(|g| g.inner).unwrap_or_else(CoreGraph::ntu);
        let channels: &[usize] = match preset {
            "desk" => &DESK_CHANNELS,
            "full" => &FULL_CHANNELS,
            _ => return Err(PyValueError::new_err(format!("unknown preset `{preset}` (desk, full)"))),
        };
        let op: SpatialOp = parse(variant)?;
        let alpha: AlphaMode = parse(alpha)?;
        let cfg = BackboneConfig::from_schedule(op, channels, 3, graph.num_vertices(), classes, alpha);
        let inner = CoreModel::new(cfg, &graph, seed).map_err(py_err)?;
        Ok(Self { inner, graph })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (inner, graph) = load_checkpoint(path).map_err(py_err)?;
        Ok(Self { inner, graph })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(&self.inner, &self.graph, path).map_err(py_err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn config_text(&self) -> String {
        self.inner.config().to_text()
    }

    /// Current alpha of every spatial layer.
    #[getter]
    fn alphas(&self) -> Vec<f64> {
        self.inner.alphas()
    }

    /// Evaluation-mode class probabilities, one row per sample.
    fn forward(&self, x: Vec<f64>, shape: Shape4) -> PyResult<Vec<Vec<f64>>> {
        let probs = self.inner.forward(&to_map(x, shape)?).map_err(py_err)?;
        Ok(to_rows(&probs))
    }

    /// Trains on the synthetic task and returns one dict per epoch.
    #[pyo3(signature = (epochs=30, clips_per_class=100, frames=32, batch_size=16, seed=0, stream="joint_motion"))]
    fn train_synthetic<'py>(
        &mut self,
        py: Python<'py>,
        epochs: usize,
        clips_per_class: usize,
        frames: usize,
        batch_size: usize,
        seed: u64,
        stream: &str,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let task = TaskOptions {
            classes: self.inner.config().num_classes,
            clips_per_class,
            frames,
            batch_size,
            stream: parse(stream)?,
            graph: self.graph.clone(),
            ..TaskOptions::default()
        };
        let data = task.dataset(seed).map_err(py_err)?;
        let log = train_with(&mut self.inner, &data, &TrainConfig::scaled(epochs, batch_size, seed), |_| {})
            .map_err(py_err)?;
        log.epochs
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("epoch", r.epoch)?;
                d.set_item("loss", r.loss)?;
                d.set_item("accuracy", r.accuracy)?;
                d.set_item("lr", r.lr)?;
                d.set_item("seconds", r.seconds)?;
                Ok(d)
            })
            .collect()
    }
}

/// Synthetic clips as `(features, shape, labels)`; `features` holds the
/// chosen stream of every clip stacked along the batch axis.
#[pyfunction]
#[pyo3(signature = (classes=6, clips_per_class=100, frames=32, seed=0, stream="joint_motion"))]
fn synthetic_dataset(
    classes: usize,
    clips_per_class: usize,
    frames: usize,
    seed: u64,
    stream: &str,
) -> PyResult<(Vec<f64>, Shape4, Vec<usize>)> {
    let graph = CoreGraph::ntu();
    let kind: StreamKind = parse(stream)?;
    let clips = synth_dataset(classes, clips_per_class, frames, &graph, seed).map_err(py_err)?;
    let maps = clips
        .iter()
        .map(|c| derive_stream(c, kind, &graph))
        .collect::<cdgc_core::Result<Vec<_>>>()
        .map_err(py_err)?;
    let labels = clips.iter().map(|c| c.label).collect();
    let (data, shape) = from_map(FeatureMap::stack(&maps).map_err(py_err)?);
    Ok((data, shape, labels))
}

#[pyfunction]
#[pyo3(signature = (trials=100, seed=0))]
fn equivcheck<'py>(py: Python<'py>, trials: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let r = run_equivcheck(&EquivOptions {
        trials,
        seed,
        inject_fault: false,
    })
    .map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("trials", r.trials)?;
    d.set_item("max_relative_error", r.max_relative_error)?;
    d.set_item("passed", r.passed())?;
    d.set_item("alphas", r.alphas_seen.clone())?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (scope="operator", seed=0, seeds=None))]
fn gradcheck<'py>(py: Python<'py>, scope: &str, seed: u64, seeds: Option<usize>) -> PyResult<Bound<'py, PyDict>> {
    let scope: GradScope = parse(scope)?;
    let r = run_gradcheck(scope, seed, seeds.unwrap_or(scope.default_seeds())).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("scope", scope.to_string())?;
    d.set_item("max_relative_error", r.max_relative_error())?;
    d.set_item("tolerance", scope.tolerance())?;
    d.set_item("passed", r.passed())?;
    d.set_item("worst", r.worst().map(|e| e.name.clone()))?;
    Ok(d)
}

/// Weighted average of per-stream score matrices.
#[pyfunction]
fn fuse_scores(sets: Vec<Vec<Vec<f64>>>, weights: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
    let mats = sets.iter().map(|s| to_matrix(s)).collect::<PyResult<Vec<_>>>()?;
    Ok(to_rows(&run_fuse(&mats, &weights).map_err(py_err)?))
}

#[pymodule]
fn cdgc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGraph>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(vanilla_gconv, m)?)?;
    m.add_function(wrap_pyfunction!(cdgc_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(cdgc_naive, m)?)?;
    m.add_function(wrap_pyfunction!(accelerated_cdgc, m)?)?;
    m.add_function(wrap_pyfunction!(spatial_shift, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(equivcheck, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_scores, m)?)?;
    Ok(())
}
