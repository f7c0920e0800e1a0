//! PV-GNN parameters, forward and reverse passes, and the binary model file.

use std::fs;
use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::loss::total_loss;
use super::ops::{
    graph_norm, graph_norm_backward, mean_sage, mean_sage_backward, relu, relu_backward, Adjacency,
    GraphNormCache,
};
use crate::brongraph::{BronchialGraph, DEFAULT_K, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::volgrid::DEFAULT_CHANNELS;

pub type DenseMatrix = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    PointVoxel,
    PointOnly,
}

impl FeatureMode {
    pub fn input_dim(self) -> usize {
        match self {
            FeatureMode::PointVoxel => 3 * DEFAULT_K + DEFAULT_CHANNELS * DEFAULT_K,
            FeatureMode::PointOnly => 3 * DEFAULT_K,
        }
    }

    fn code(self) -> u32 {
        match self {
            FeatureMode::PointVoxel => 0,
            FeatureMode::PointOnly => 1,
        }
    }

    fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(FeatureMode::PointVoxel),
            1 => Some(FeatureMode::PointOnly),
            _ => None,
        }
    }
}

impl std::str::FromStr for FeatureMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "point_voxel" => Ok(FeatureMode::PointVoxel),
            "point_only" | "point" => Ok(FeatureMode::PointOnly),
            other => Err(format!(
                "unknown feature mode `{other}` (expected point_voxel or point_only)"
            )),
        }
    }
}

/// One or more graphs prepared for the network: stacked node features,
/// edges in stacked indices, labels, and the node range of each graph.
/// GraphNorm statistics never cross graph boundaries.
#[derive(Debug, Clone)]
pub struct GraphInput {
    pub x: DenseMatrix,
    pub edges: Vec<(usize, usize)>,
    pub adjacency: Adjacency,
    pub labels: Option<Vec<usize>>,
    pub parts: Vec<Range<usize>>,
}

impl GraphInput {
    pub fn new(
        x: DenseMatrix,
        edges: Vec<(usize, usize)>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let adjacency = Adjacency::new(x.nrows(), &edges)?;
        if let Some(l) = &labels {
            if l.len() != x.nrows() {
                return Err(Error::DimMismatch(format!(
                    "{} labels for {} nodes",
                    l.len(),
                    x.nrows()
                )));
            }
        }
        let parts = vec![0..x.nrows()];
        Ok(Self {
            x,
            edges,
            adjacency,
            labels,
            parts,
        })
    }

    /// Stacks graphs block-diagonally.
    pub fn stack(graphs: &[&GraphInput]) -> Result<Self> {
        let first = graphs
            .first()
            .ok_or_else(|| Error::InvalidInput("nothing to stack".into()))?;
        let cols = first.x.ncols();
        let n: usize = graphs.iter().map(|g| g.n_nodes()).sum();
        let mut x = Array2::zeros((n, cols));
        let mut edges = Vec::new();
        let mut labels = Some(Vec::with_capacity(n));
        let mut parts = Vec::new();
        let mut offset = 0;
        for g in graphs {
            if g.x.ncols() != cols {
                return Err(Error::DimMismatch(
                    "stacked graphs differ in feature length".into(),
                ));
            }
            x.slice_mut(s![offset..offset + g.n_nodes(), ..])
                .assign(&g.x);
            edges.extend(g.edges.iter().map(|&(a, b)| (a + offset, b + offset)));
            labels = match (labels, &g.labels) {
                (Some(mut acc), Some(l)) => {
                    acc.extend_from_slice(l);
                    Some(acc)
                }
                _ => None,
            };
            parts.extend(g.parts.iter().map(|r| r.start + offset..r.end + offset));
            offset += g.n_nodes();
        }
        let adjacency = Adjacency::new(n, &edges)?;
        Ok(Self {
            x,
            edges,
            adjacency,
            labels,
            parts,
        })
    }

    pub fn from_graph(graph: &BronchialGraph, mode: FeatureMode) -> Result<Self> {
        let dim = mode.input_dim();
        let mut x = Array2::zeros((graph.n_nodes(), dim));
        for (i, node) in graph.nodes.iter().enumerate() {
            let mut feat: Vec<f64> = node.point_feat.clone();
            if mode == FeatureMode::PointVoxel {
                feat.extend_from_slice(&node.voxel_feat);
            }
            if feat.len() != dim {
                return Err(Error::DimMismatch(format!(
                    "node {i} has {} features, model expects {dim}",
                    feat.len()
                )));
            }
            x.row_mut(i).assign(&Array1::from(feat));
        }
        Self::new(x, graph.edges.clone(), graph.labels())
    }

    pub fn n_nodes(&self) -> usize {
        self.x.nrows()
    }

    pub fn with_edges(&self, edges: Vec<(usize, usize)>) -> Result<Self> {
        let adjacency = Adjacency::new(self.n_nodes(), &edges)?;
        Ok(Self {
            x: self.x.clone(),
            edges,
            adjacency,
            labels: self.labels.clone(),
            parts: self.parts.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub w_self: DenseMatrix,
    pub w_neigh: DenseMatrix,
    pub bias: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub alpha: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub feature_mode: FeatureMode,
    pub hidden: usize,
    /// Conv-Norm blocks including the input projection.
    pub blocks: usize,
    pub classes: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            feature_mode: FeatureMode::PointVoxel,
            hidden: 256,
            blocks: 5,
            classes: NUM_CLASSES,
        }
    }
}

impl ModelShape {
    pub fn input_dim(&self) -> usize {
        self.feature_mode.input_dim()
    }

    fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.blocks == 0 || self.classes == 0 {
            return Err(Error::InvalidInput(
                "hidden, blocks and classes must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PvgnnParams {
    pub shape: ModelShape,
    pub w_in: DenseMatrix,
    pub b_in: Array1<f64>,
    pub blocks: Vec<BlockParams>,
    pub w_head: DenseMatrix,
    pub b_head: Array1<f64>,
}

impl PvgnnParams {
    pub fn zeros(shape: ModelShape) -> Result<Self> {
        shape.validate()?;
        let h = shape.hidden;
        let block = BlockParams {
            w_self: Array2::zeros((h, h)),
            w_neigh: Array2::zeros((h, h)),
            bias: Array1::zeros(h),
            gamma: Array1::zeros(h),
            beta: Array1::zeros(h),
            alpha: Array1::zeros(h),
        };
        Ok(Self {
            shape,
            w_in: Array2::zeros((shape.input_dim(), h)),
            b_in: Array1::zeros(h),
            blocks: vec![block; shape.blocks - 1],
            w_head: Array2::zeros((h, shape.classes)),
            b_head: Array1::zeros(shape.classes),
        })
    }

    /// He-normal weights, zero biases, unit GraphNorm scale and mean gate.
    pub fn init(shape: ModelShape, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |m: &mut DenseMatrix, gain: f64| {
            let d = Normal::new(0.0, (gain / m.nrows() as f64).sqrt()).expect("finite std");
            m.mapv_inplace(|_| d.sample(&mut rng));
        };
        fill(&mut p.w_in, 2.0);
        for b in &mut p.blocks {
            fill(&mut b.w_self, 1.0);
            fill(&mut b.w_neigh, 1.0);
            b.gamma.fill(1.0);
            b.alpha.fill(1.0);
        }
        fill(&mut p.w_head, 1.0);
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape).expect("shape already validated")
    }

    /// Every tensor in declaration order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![slice2(&self.w_in), slice1(&self.b_in)];
        for b in &self.blocks {
            v.extend([
                slice2(&b.w_self),
                slice2(&b.w_neigh),
                slice1(&b.bias),
                slice1(&b.gamma),
                slice1(&b.beta),
                slice1(&b.alpha),
            ]);
        }
        v.extend([slice2(&self.w_head), slice1(&self.b_head)]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![
            self.w_in.as_slice_mut().expect("standard layout"),
            self.b_in.as_slice_mut().expect("standard layout"),
        ];
        for b in &mut self.blocks {
            v.push(b.w_self.as_slice_mut().expect("standard layout"));
            v.push(b.w_neigh.as_slice_mut().expect("standard layout"));
            v.push(b.bias.as_slice_mut().expect("standard layout"));
            v.push(b.gamma.as_slice_mut().expect("standard layout"));
            v.push(b.beta.as_slice_mut().expect("standard layout"));
            v.push(b.alpha.as_slice_mut().expect("standard layout"));
        }
        v.push(self.w_head.as_slice_mut().expect("standard layout"));
        v.push(self.b_head.as_slice_mut().expect("standard layout"));
        v
    }

    /// `(rows, cols)` of every tensor; vectors are `(len, 1)`.
    pub fn tensor_shapes(&self) -> Vec<(usize, usize)> {
        let mut v = vec![self.w_in.dim(), (self.b_in.len(), 1)];
        for b in &self.blocks {
            v.extend([
                b.w_self.dim(),
                b.w_neigh.dim(),
                (b.bias.len(), 1),
                (b.gamma.len(), 1),
                (b.beta.len(), 1),
                (b.alpha.len(), 1),
            ]);
        }
        v.extend([self.w_head.dim(), (self.b_head.len(), 1)]);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

fn slice2(m: &DenseMatrix) -> &[f64] {
    m.as_slice().expect("standard layout")
}

fn slice1(v: &Array1<f64>) -> &[f64] {
    v.as_slice().expect("standard layout")
}

struct BlockCache {
    input: DenseMatrix,
    agg: DenseMatrix,
    norm: Vec<GraphNormCache>,
    pre_act: DenseMatrix,
}

pub struct ForwardCache {
    pre_in: DenseMatrix,
    blocks: Vec<BlockCache>,
    last_hidden: DenseMatrix,
}

/// `ReLU(GN(MSC(H))) + H` for non-first blocks, on a single graph.
pub fn conv_norm_block(
    h: &DenseMatrix,
    adj: &Adjacency,
    p: &BlockParams,
    is_first: bool,
) -> Result<DenseMatrix> {
    Ok(conv_norm_block_cached(h, adj, &[0..h.nrows()], p, is_first)?.0)
}

fn conv_norm_block_cached(
    h: &DenseMatrix,
    adj: &Adjacency,
    parts: &[Range<usize>],
    p: &BlockParams,
    is_first: bool,
) -> Result<(DenseMatrix, BlockCache)> {
    let (pre, agg) = mean_sage(h, adj, &p.w_self, &p.w_neigh, &p.bias)?;
    let mut g = Array2::zeros(pre.raw_dim());
    let mut norm = Vec::with_capacity(parts.len());
    for r in parts {
        let (out, cache) = graph_norm(
            &pre.slice(s![r.clone(), ..]).to_owned(),
            &p.gamma,
            &p.beta,
            &p.alpha,
        )?;
        g.slice_mut(s![r.clone(), ..]).assign(&out);
        norm.push(cache);
    }
    let mut out = relu(&g);
    if !is_first {
        if out.dim() != h.dim() {
            return Err(Error::DimMismatch(format!(
                "residual {:?} vs {:?}",
                out.dim(),
                h.dim()
            )));
        }
        out += h;
    }
    Ok((
        out,
        BlockCache {
            input: h.clone(),
            agg,
            norm,
            pre_act: g,
        },
    ))
}

fn check_input(graph: &GraphInput, params: &PvgnnParams) -> Result<()> {
    if graph.x.ncols() != params.shape.input_dim() {
        return Err(Error::DimMismatch(format!(
            "node features have length {}, model expects {}",
            graph.x.ncols(),
            params.shape.input_dim()
        )));
    }
    if graph.n_nodes() == 0 {
        return Err(Error::InvalidInput("graph has no nodes".into()));
    }
    Ok(())
}

pub fn forward_cached(
    graph: &GraphInput,
    params: &PvgnnParams,
) -> Result<(DenseMatrix, ForwardCache)> {
    check_input(graph, params)?;
    let pre_in = graph.x.dot(&params.w_in) + &params.b_in;
    let mut h = relu(&pre_in);
    let mut caches = Vec::with_capacity(params.blocks.len());
    for b in &params.blocks {
        let (next, cache) = conv_norm_block_cached(&h, &graph.adjacency, &graph.parts, b, false)?;
        caches.push(cache);
        h = next;
    }
    let z = h.dot(&params.w_head) + &params.b_head;
    Ok((
        z,
        ForwardCache {
            pre_in,
            blocks: caches,
            last_hidden: h,
        },
    ))
}

/// Logits `N x classes`.
pub fn forward(graph: &GraphInput, params: &PvgnnParams) -> Result<DenseMatrix> {
    Ok(forward_cached(graph, params)?.0)
}

/// Gradients of every parameter given the logit gradient `dz`.
pub fn backward_from_logits(
    graph: &GraphInput,
    params: &PvgnnParams,
    cache: &ForwardCache,
    dz: &DenseMatrix,
) -> PvgnnParams {
    let mut grads = params.zeros_like();
    grads.w_head = cache.last_hidden.t().dot(dz);
    grads.b_head = dz.sum_axis(Axis(0));
    let mut dh = dz.dot(&params.w_head.t());
    for (k, (p, c)) in params.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        let dg = relu_backward(&c.pre_act, &dh);
        let g = &mut grads.blocks[k];
        let mut ds = Array2::zeros(dg.raw_dim());
        for (r, norm) in graph.parts.iter().zip(&c.norm) {
            let gn = graph_norm_backward(
                norm,
                &p.gamma,
                &p.alpha,
                &dg.slice(s![r.clone(), ..]).to_owned(),
            );
            ds.slice_mut(s![r.clone(), ..]).assign(&gn.dx);
            g.gamma += &gn.dgamma;
            g.beta += &gn.dbeta;
            g.alpha += &gn.dalpha;
        }
        let sage = mean_sage_backward(
            &c.input,
            &c.agg,
            &graph.adjacency,
            &p.w_self,
            &p.w_neigh,
            &ds,
        );
        g.w_self = sage.dw_self;
        g.w_neigh = sage.dw_neigh;
        g.bias = sage.dbias;
        dh = dh + sage.dx;
    }
    let dpre = relu_backward(&cache.pre_in, &dh);
    grads.w_in = graph.x.t().dot(&dpre);
    grads.b_in = dpre.sum_axis(Axis(0));
    grads
}

/// Loss and parameter gradients of `total_loss` for one labelled graph.
/// `ncr_edges` defaults to the graph's own edges.
pub fn backward(
    graph: &GraphInput,
    params: &PvgnnParams,
    alpha_ncr: f64,
    ncr_edges: Option<&[(usize, usize)]>,
) -> Result<(f64, PvgnnParams)> {
    let labels = graph
        .labels
        .as_deref()
        .ok_or_else(|| Error::InvalidInput("graph has no labels".into()))?;
    let (z, cache) = forward_cached(graph, params)?;
    let (loss, dz) = total_loss(&z, labels, ncr_edges.unwrap_or(&graph.edges), alpha_ncr)?;
    Ok((loss, backward_from_logits(graph, params, &cache, &dz)))
}

/// Row-wise argmax, ties to the lower class id.
pub fn argmax_rows(z: &DenseMatrix) -> Vec<usize> {
    z.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn predict(graph: &GraphInput, params: &PvgnnParams) -> Result<(Vec<usize>, DenseMatrix)> {
    let z = forward(graph, params)?;
    Ok((argmax_rows(&z), z))
}

const MAGIC: &[u8; 4] = b"PVGN";
const FORMAT_VERSION: u32 = 1;

impl PvgnnParams {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let shapes = self.tensor_shapes();
        for v in [
            FORMAT_VERSION,
            self.shape.feature_mode.code(),
            self.shape.input_dim() as u32,
            self.shape.hidden as u32,
            self.shape.blocks as u32,
            self.shape.classes as u32,
            shapes.len() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (r, c) in shapes {
            out.extend_from_slice(&(r as u64).to_le_bytes());
            out.extend_from_slice(&(c as u64).to_le_bytes());
        }
        for t in self.tensors() {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> std::result::Result<&[u8], String> {
            let s = bytes
                .get(pos..pos + n)
                .ok_or_else(|| format!("truncated at byte {pos}"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err("bad magic, not a model file".into());
        }
        let mut u32s = [0u32; 7];
        for v in &mut u32s {
            *v = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        }
        let [version, mode, in_dim, hidden, blocks, classes, n_tensors] = u32s;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported model version {version}"));
        }
        let feature_mode = FeatureMode::from_code(mode)
            .ok_or_else(|| format!("unknown feature mode code {mode}"))?;
        let shape = ModelShape {
            feature_mode,
            hidden: hidden as usize,
            blocks: blocks as usize,
            classes: classes as usize,
        };
        if shape.input_dim() != in_dim as usize {
            return Err(format!("input dim {in_dim} inconsistent with feature mode"));
        }
        let mut params = Self::zeros(shape).map_err(|e| e.to_string())?;
        let expected = params.tensor_shapes();
        if expected.len() != n_tensors as usize {
            return Err(format!(
                "{n_tensors} tensors in file, shape implies {}",
                expected.len()
            ));
        }
        for (i, &(r, c)) in expected.iter().enumerate() {
            let fr = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
            let fc = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
            if (fr, fc) != (r, c) {
                return Err(format!(
                    "tensor {i} has shape ({fr}, {fc}), expected ({r}, {c})"
                ));
            }
        }
        for t in params.tensors_mut() {
            for v in t.iter_mut() {
                *v = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
            }
        }
        if pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - pos));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|m| Error::format(path, m))
    }
}
