//! Python bindings: synthetic cases, bronchial graphs, skeletonization,
//! PV-GNN training and inference. Volumes cross the boundary as flat
//! x-fastest lists plus `(nx, ny, nz)` dims.

use std::path::PathBuf;

use bronchus_core::ahr;
use bronchus_core::brongraph::{augment_copies, AugmentParams, BronchialGraph};
use bronchus_core::metrics;
use bronchus_core::pipeline::case_graph;
use bronchus_core::pvgnn::{self, FeatureMode, GraphInput, ModelShape, PvgnnParams, TrainConfig};
use bronchus_core::skeleton::{self, SegmentOptions};
use bronchus_core::synthgen::{self, SynthParams, SyntheticCase};
use bronchus_core::volgrid::{self, Dims, Mask, Volume};
use bronchus_core::Error;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn mask_from(data: Vec<bool>, dims: (usize, usize, usize)) -> PyResult<Mask> {
    Volume::from_vec(Dims::new(dims.0, dims.1, dims.2), data).map_err(err)
}

fn feature_mode(name: &str) -> PyResult<FeatureMode> {
    name.parse().map_err(PyValueError::new_err)
}

fn inputs(graphs: &[PyRef<'_, Graph>], mode: FeatureMode) -> PyResult<Vec<GraphInput>> {
    graphs.iter().map(|g| GraphInput::from_graph(&g.inner, mode).map_err(err)).collect()
}

#[pyclass(module = "bronchusnet", skip_from_py_object)]
#[derive(Clone)]
struct Graph {
    inner: BronchialGraph,
}

#[pymethods]
impl Graph {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = BronchialGraph::from_json(text).map_err(PyValueError::new_err)?;
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: BronchialGraph::read(&path).map_err(err)? })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(&path).map_err(err)
    }

    #[getter]
    fn n_nodes(&self) -> usize {
        self.inner.n_nodes()
    }

    #[getter]
    fn edges(&self) -> Vec<(usize, usize)> {
        self.inner.edges.clone()
    }

    fn labels(&self) -> Option<Vec<usize>> {
        self.inner.labels()
    }

    fn point_features(&self) -> Vec<Vec<f64>> {
        self.inner.nodes.iter().map(|n| n.point_feat.clone()).collect()
    }

    fn voxel_features(&self) -> Vec<Vec<f64>> {
        self.inner.nodes.iter().map(|n| n.voxel_feat.clone()).collect()
    }

    /// `n` augmented copies with default augmentation parameters.
    #[pyo3(signature = (n, seed=0))]
    fn augment(&self, n: usize, seed: u64) -> PyResult<Vec<Graph>> {
        let copies = augment_copies(&self.inner, n, seed, &AugmentParams::default()).map_err(err)?;
        Ok(copies.into_iter().map(|inner| Graph { inner }).collect())
    }

    fn __len__(&self) -> usize {
        self.inner.n_nodes()
    }

    fn __repr__(&self) -> String {
        format!("Graph(nodes={}, edges={})", self.inner.n_nodes(), self.inner.edges.len())
    }
}

#[pyclass(module = "bronchusnet")]
struct Case {
    inner: SyntheticCase,
}

#[pymethods]
impl Case {
    #[staticmethod]
    #[pyo3(signature = (seed, depth=4, volume=64, root_radius=3.0))]
    fn generate(seed: u64, depth: usize, volume: usize, root_radius: f64) -> PyResult<Self> {
        let params = SynthParams { depth, volume, root_radius, ..Default::default() };
        Ok(Self { inner: synthgen::generate_case(seed, &params).map_err(err)? })
    }

    #[staticmethod]
    fn read(dir: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: synthgen::read_case(&dir).map_err(err)? })
    }

    fn write(&self, dir: PathBuf) -> PyResult<()> {
        synthgen::write_case(&self.inner, &dir).map_err(err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        let d = self.inner.dims();
        (d.nx, d.ny, d.nz)
    }

    fn ct(&self) -> Vec<f32> {
        self.inner.ct.data().to_vec()
    }

    fn gt_mask(&self) -> Vec<bool> {
        self.inner.gt_mask.data().to_vec()
    }

    fn centerline_mask(&self) -> Vec<bool> {
        self.inner.centerline_mask().data().to_vec()
    }

    #[pyo3(signature = (k=10, min_segment_len=0))]
    fn graph(&self, k: usize, min_segment_len: usize) -> PyResult<Graph> {
        let inner = case_graph(&self.inner, k, SegmentOptions { min_segment_len }).map_err(err)?;
        Ok(Graph { inner })
    }
}

#[pyclass(module = "bronchusnet")]
struct Model {
    inner: PvgnnParams,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: PvgnnParams::load(&path).map_err(err)? })
    }

    /// A model with every weight zero; it predicts class 0 everywhere.
    #[staticmethod]
    fn zeros() -> PyResult<Self> {
        Ok(Self { inner: PvgnnParams::zeros(ModelShape::default()).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn predict(&self, graph: &Graph) -> PyResult<Vec<usize>> {
        let input = GraphInput::from_graph(&graph.inner, self.inner.shape.feature_mode).map_err(err)?;
        Ok(pvgnn::predict(&input, &self.inner).map_err(err)?.0)
    }

    fn logits(&self, graph: &Graph) -> PyResult<Vec<Vec<f64>>> {
        let input = GraphInput::from_graph(&graph.inner, self.inner.shape.feature_mode).map_err(err)?;
        let (_, z) = pvgnn::predict(&input, &self.inner).map_err(err)?;
        Ok(z.rows().into_iter().map(|r| r.to_vec()).collect())
    }

    fn accuracy(&self, graphs: Vec<PyRef<'_, Graph>>) -> PyResult<f64> {
        let set = inputs(&graphs, self.inner.shape.feature_mode)?;
        pvgnn::node_accuracy(&set, &self.inner).map_err(err)
    }

    fn __repr__(&self) -> String {
        let s = &self.inner.shape;
        format!("Model(hidden={}, blocks={}, classes={}, features={:?})", s.hidden, s.blocks, s.classes, s.feature_mode)
    }
}

/// Trains a PV-GNN. Returns the model and one dict per epoch.
#[pyfunction]
#[pyo3(signature = (train_graphs, val_graphs=Vec::new(), epochs=200, lr=1e-3, seed=0, alpha_ncr=1.0, dropedge_p=0.1, feature_mode="point_voxel"))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    train_graphs: Vec<PyRef<'py, Graph>>,
    val_graphs: Vec<PyRef<'py, Graph>>,
    epochs: usize,
    lr: f64,
    seed: u64,
    alpha_ncr: f64,
    dropedge_p: f64,
    feature_mode: &str,
) -> PyResult<(Model, Vec<Bound<'py, PyDict>>)> {
    let mode = self::feature_mode(feature_mode)?;
    let config = TrainConfig { epochs, lr, seed, alpha_ncr, dropedge_p, feature_mode: mode, ..Default::default() };
    let (train_set, val_set) = (inputs(&train_graphs, mode)?, inputs(&val_graphs, mode)?);
    let (params, history) = pvgnn::train(&train_set, &val_set, &config).map_err(err)?;
    let records = history
        .iter()
        .map(|h| {
            let d = PyDict::new(py);
            d.set_item("epoch", h.epoch)?;
            d.set_item("train_loss", h.train_loss)?;
            d.set_item("val_acc", h.val_acc)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((Model { inner: params }, records))
}

#[pyfunction]
fn derive_seed(seed: u64, stream: u64) -> u64 {
    synthgen::derive_seed(seed, stream)
}

/// Case seeds of a deterministic train/test split.
#[pyfunction]
#[pyo3(signature = (n_cases, seed=0, train_fraction=0.7))]
fn generate_dataset(n_cases: usize, seed: u64, train_fraction: f64) -> PyResult<(Vec<u64>, Vec<u64>)> {
    let split = synthgen::generate_dataset(n_cases, seed, train_fraction).map_err(err)?;
    Ok((split.train.iter().map(|c| c.seed).collect(), split.test.iter().map(|c| c.seed).collect()))
}

/// Otsu threshold and the `<= threshold` mask of a flat volume.
#[pyfunction]
fn otsu_threshold(data: Vec<f32>, dims: (usize, usize, usize)) -> PyResult<(f64, Vec<bool>)> {
    let vol = Volume::from_vec(Dims::new(dims.0, dims.1, dims.2), data).map_err(err)?;
    let (t, mask) = volgrid::otsu_threshold(&vol).map_err(err)?;
    Ok((t, mask.data().to_vec()))
}

#[pyfunction]
fn main_trachea(mask: Vec<bool>, dims: (usize, usize, usize)) -> PyResult<Vec<bool>> {
    Ok(volgrid::main_trachea(&mask_from(mask, dims)?).map_err(err)?.data().to_vec())
}

#[pyfunction]
fn maxpool_stride2(mask: Vec<bool>, dims: (usize, usize, usize)) -> PyResult<(Vec<bool>, (usize, usize, usize))> {
    let pooled = volgrid::maxpool_stride2(&mask_from(mask, dims)?);
    let d = pooled.dims();
    Ok((pooled.data().to_vec(), (d.nx, d.ny, d.nz)))
}

#[pyfunction]
fn dilate26(mask: Vec<bool>, dims: (usize, usize, usize)) -> PyResult<Vec<bool>> {
    Ok(volgrid::dilate26(&mask_from(mask, dims)?).data().to_vec())
}

/// Thinned mask, same layout as the input.
#[pyfunction]
fn skeletonize(mask: Vec<bool>, dims: (usize, usize, usize)) -> PyResult<Vec<bool>> {
    Ok(skeleton::skeletonize(&mask_from(mask, dims)?).map_err(err)?.mask().data().to_vec())
}

/// Voxel chains of the branch segments of a thinned mask.
#[pyfunction]
fn segments(mask: Vec<bool>, dims: (usize, usize, usize)) -> PyResult<Vec<Vec<[usize; 3]>>> {
    let skel = skeleton::skeletonize(&mask_from(mask, dims)?).map_err(err)?;
    let classes = skeleton::classify_points(&skel);
    Ok(skeleton::extract_segments(&skel, &classes).segments)
}

/// Free-logit optimization of the hard-region loss family; returns the
/// dice trajectory and the final hard-region terms.
#[pyfunction]
#[pyo3(signature = (gt, trachea, dims, levels=3, steps=500, lr=1.0))]
fn segdemo(
    gt: Vec<bool>,
    trachea: Vec<bool>,
    dims: (usize, usize, usize),
    levels: usize,
    steps: usize,
    lr: f64,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let out = ahr::optimize_logits_demo(&mask_from(gt, dims)?, &mask_from(trachea, dims)?, levels, steps, lr)
        .map_err(err)?;
    Ok((out.dice_trajectory, out.final_report.hr_terms))
}

#[pyfunction]
fn classification_metrics<'py>(
    py: Python<'py>,
    pred: Vec<usize>,
    gt: Vec<usize>,
    num_classes: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let s = metrics::classification_metrics(&pred, &gt, num_classes).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("accuracy", s.accuracy)?;
    d.set_item("precision", s.precision)?;
    d.set_item("recall", s.recall)?;
    d.set_item("f1", s.f1)?;
    Ok(d)
}

#[pyfunction]
fn neighbor_disagreement(pred: Vec<usize>, gt: Vec<usize>, edges: Vec<(usize, usize)>) -> PyResult<f64> {
    metrics::neighbor_disagreement(&pred, &gt, &edges).map_err(err)
}

#[pymodule]
fn bronchusnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Graph>()?;
    m.add_class::<Case>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(otsu_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(main_trachea, m)?)?;
    m.add_function(wrap_pyfunction!(maxpool_stride2, m)?)?;
    m.add_function(wrap_pyfunction!(dilate26, m)?)?;
    m.add_function(wrap_pyfunction!(skeletonize, m)?)?;
    m.add_function(wrap_pyfunction!(segments, m)?)?;
    m.add_function(wrap_pyfunction!(segdemo, m)?)?;
    m.add_function(wrap_pyfunction!(classification_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(neighbor_disagreement, m)?)?;
    Ok(())
}
