//! Featured airway graphs: one node per centerline segment, edges between
//! segments sharing a junction, bounding-box-normalised point features
//! and descriptor-volume voxel features sampled at the same K positions.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::skeleton::SegmentSet;
use crate::volgrid::FeatureVolume;

/// Samples per segment.
pub const DEFAULT_K: usize = 10;
/// 18 segmental classes plus "other".
pub const NUM_CLASSES: usize = 19;
pub const OTHER_CLASS: usize = 18;

/// Subsampled chain positions `round(i (len - 1) / (k - 1))`, repeating
/// indices when the chain is shorter than `k`.
pub fn sample_indices(len: usize, k: usize) -> Vec<usize> {
    if k <= 1 || len <= 1 {
        return vec![0; k];
    }
    let span = len - 1;
    let steps = k - 1;
    (0..k)
        .map(|i| (2 * i * span + steps) / (2 * steps))
        .collect()
}

/// `3k` coordinates of `k` chain samples, each normalised to [0, 1] within
/// the chain's bounding box. Axes with zero extent map to 0.5.
pub fn point_feature(chain: &[[f64; 3]], k: usize) -> Result<Vec<f64>> {
    if chain.is_empty() {
        return Err(Error::InvalidInput(
            "point feature of an empty chain".into(),
        ));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in chain {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let mut out = Vec::with_capacity(3 * k);
    for i in sample_indices(chain.len(), k) {
        for a in 0..3 {
            let extent = hi[a] - lo[a];
            out.push(if extent > 0.0 {
                (chain[i][a] - lo[a]) / extent
            } else {
                0.5
            });
        }
    }
    Ok(out)
}

/// `C * k` descriptor values read at the same samples as [`point_feature`],
/// channels contiguous per sample.
pub fn voxel_feature(chain: &[[usize; 3]], feats: &FeatureVolume, k: usize) -> Result<Vec<f64>> {
    if chain.is_empty() {
        return Err(Error::InvalidInput(
            "voxel feature of an empty chain".into(),
        ));
    }
    let dims = feats.dims();
    if let Some(&bad) = chain.iter().find(|p| !dims.contains(**p)) {
        return Err(Error::OutOfBounds {
            voxel: bad,
            dims: dims.as_array(),
        });
    }
    Ok(sample_indices(chain.len(), k)
        .into_iter()
        .flat_map(|i| feats.voxel(chain[i]).iter().map(|&v| v as f64))
        .collect())
}

fn round_sig9(v: f64) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{v:.8e}").parse().unwrap_or(v)
}

fn ser_sig9<S: Serializer>(vals: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(vals.iter().map(|&v| round_sig9(v)))
}

fn ser_chain<S: Serializer>(chain: &[[f64; 3]], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(chain.iter().map(|p| p.map(round_sig9)))
}

fn de_chain<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<[f64; 3]>, D::Error> {
    Vec::<[f64; 3]>::deserialize(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphNode {
    pub id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    /// Centerline coordinates; integral until augmentation moves them.
    #[serde(serialize_with = "ser_chain", deserialize_with = "de_chain")]
    pub chain: Vec<[f64; 3]>,
    #[serde(serialize_with = "ser_sig9")]
    pub point_feat: Vec<f64>,
    #[serde(serialize_with = "ser_sig9")]
    pub voxel_feat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BronchialGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<(usize, usize)>,
}

impl BronchialGraph {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Labels of every node, if all nodes carry one.
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.nodes.iter().map(|n| n.label).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        let mut seen = std::collections::BTreeSet::new();
        for &(a, b) in &self.edges {
            if a >= n || b >= n {
                return bad(format!("edge ({a}, {b}) references a node outside 0..{n}"));
            }
            if a == b {
                return bad(format!("self-loop on node {a}"));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return bad(format!("duplicate edge ({a}, {b})"));
            }
        }
        let Some(first) = self.nodes.first() else {
            return Ok(());
        };
        let (pl, vl) = (first.point_feat.len(), first.voxel_feat.len());
        if pl % 3 != 0 {
            return bad(format!("point_feat length {pl} is not a multiple of 3"));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id != i {
                return bad(format!("node at position {i} has id {}", node.id));
            }
            if node.point_feat.len() != pl || node.voxel_feat.len() != vl {
                return bad(format!("node {i} feature lengths differ from node 0"));
            }
            if node.point_feat.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return bad(format!("node {i} point_feat leaves [0, 1]"));
            }
            if node.chain.is_empty() {
                return bad(format!("node {i} has an empty chain"));
            }
            if node.label.is_some_and(|l| l >= NUM_CLASSES) {
                return bad(format!("node {i} label outside 0..{NUM_CLASSES}"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Parses and validates; parse errors name the JSON path at fault.
    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let graph: BronchialGraph = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            format!("field `{path}`: {}", e.into_inner())
        })?;
        graph.validate().map_err(|e| e.to_string())?;
        Ok(graph)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|msg| Error::format(path, msg))
    }
}

pub fn build_graph(
    segments: &SegmentSet,
    feats: &FeatureVolume,
    labels: Option<&[usize]>,
    k: usize,
) -> Result<BronchialGraph> {
    if let Some(l) = labels {
        if l.len() != segments.segments.len() {
            return Err(Error::DimMismatch(format!(
                "{} labels for {} segments",
                l.len(),
                segments.segments.len()
            )));
        }
    }
    let nodes = segments
        .segments
        .iter()
        .enumerate()
        .map(|(id, chain)| {
            let chain_f: Vec<[f64; 3]> = chain.iter().map(|p| p.map(|c| c as f64)).collect();
            Ok(GraphNode {
                id,
                label: labels.map(|l| l[id]),
                point_feat: point_feature(&chain_f, k)?,
                voxel_feat: voxel_feature(chain, feats, k)?,
                chain: chain_f,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let graph = BronchialGraph {
        nodes,
        edges: segments.adjacency.clone(),
    };
    graph.validate()?;
    Ok(graph)
}

/// Smooth displacement field: a sum of random sinusoidal modes.
#[derive(Debug, Clone, PartialEq)]
pub struct ElasticField {
    modes: Vec<([f64; 3], [f64; 3], f64)>,
}

impl ElasticField {
    pub fn displacement(&self, p: [f64; 3]) -> [f64; 3] {
        let mut d = [0.0; 3];
        for (amp, freq, phase) in &self.modes {
            let s = (freq[0] * p[0] + freq[1] * p[1] + freq[2] * p[2] + phase).sin();
            for a in 0..3 {
                d[a] += amp[a] * s;
            }
        }
        d
    }
}

/// `p -> p + (A - I)(p - center) + translation + elastic(p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialTransform {
    pub linear: [[f64; 3]; 3],
    pub center: [f64; 3],
    pub translation: [f64; 3],
    pub elastic: Option<ElasticField>,
}

impl SpatialTransform {
    pub fn identity() -> Self {
        Self {
            linear: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            center: [0.0; 3],
            translation: [0.0; 3],
            elastic: None,
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let rel = [
            p[0] - self.center[0],
            p[1] - self.center[1],
            p[2] - self.center[2],
        ];
        let disp = self.elastic.as_ref().map(|e| e.displacement(p));
        let mut out = p;
        for r in 0..3 {
            let mut delta = self.translation[r];
            for c in 0..3 {
                let a = self.linear[r][c] - if r == c { 1.0 } else { 0.0 };
                delta += a * rel[c];
            }
            if let Some(d) = disp {
                delta += d[r];
            }
            out[r] += delta;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub max_rotation_deg: f64,
    pub scale_range: (f64, f64),
    /// Peak displacement scale of the elastic field, in voxels.
    pub elastic_sigma: f64,
    /// Spatial wavelength of the elastic modes, in voxels.
    pub elastic_wavelength: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            max_rotation_deg: 10.0,
            scale_range: (0.9, 1.1),
            elastic_sigma: 1.0,
            elastic_wavelength: 24.0,
        }
    }
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = (0..3).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    out
}

fn rotation(axis: usize, angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    let (i, j) = ((axis + 1) % 3, (axis + 2) % 3);
    let mut m = [[0.0; 3]; 3];
    m[axis][axis] = 1.0;
    m[i][i] = c;
    m[i][j] = -s;
    m[j][i] = s;
    m[j][j] = c;
    m
}

fn centroid(graph: &BronchialGraph) -> [f64; 3] {
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for p in graph.nodes.iter().flat_map(|node| &node.chain) {
        for a in 0..3 {
            sum[a] += p[a];
        }
        n += 1;
    }
    sum.map(|s| if n > 0 { s / n as f64 } else { 0.0 })
}

/// Draws a random affine (rotation, per-axis scale) plus elastic transform
/// about the graph centroid.
pub fn random_transform(
    graph: &BronchialGraph,
    seed: u64,
    params: &AugmentParams,
) -> SpatialTransform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max = params.max_rotation_deg.to_radians();
    let mut linear = SpatialTransform::identity().linear;
    for axis in 0..3 {
        let angle = if max > 0.0 {
            rng.random_range(-max..=max)
        } else {
            0.0
        };
        linear = matmul3(&rotation(axis, angle), &linear);
    }
    let (lo, hi) = params.scale_range;
    let scale: [f64; 3] = std::array::from_fn(|_| {
        if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        }
    });
    for row in linear.iter_mut() {
        for (c, v) in row.iter_mut().enumerate() {
            *v *= scale[c];
        }
    }
    let elastic = (params.elastic_sigma > 0.0).then(|| {
        let k = 2.0 * PI / params.elastic_wavelength;
        let modes = (0..4)
            .map(|_| {
                let amp: [f64; 3] = std::array::from_fn(|_| {
                    params.elastic_sigma
                        * 0.5
                        * Distribution::<f64>::sample(&StandardNormal, &mut rng)
                });
                let freq: [f64; 3] = std::array::from_fn(|_| k * rng.random_range(-1.0..=1.0));
                (amp, freq, rng.random_range(0.0..2.0 * PI))
            })
            .collect();
        ElasticField { modes }
    });
    SpatialTransform {
        linear,
        center: centroid(graph),
        translation: [0.0; 3],
        elastic,
    }
}

/// Moves every chain through `transform` and recomputes point features;
/// topology, labels and voxel features are untouched.
pub fn augment_with(
    graph: &BronchialGraph,
    transform: &SpatialTransform,
) -> Result<BronchialGraph> {
    let mut out = graph.clone();
    for node in &mut out.nodes {
        let k = node.point_feat.len() / 3;
        node.chain = node.chain.iter().map(|&p| transform.apply(p)).collect();
        node.point_feat = point_feature(&node.chain, k)?;
    }
    Ok(out)
}

pub fn augment(
    graph: &BronchialGraph,
    seed: u64,
    params: &AugmentParams,
) -> Result<BronchialGraph> {
    augment_with(graph, &random_transform(graph, seed, params))
}

/// `n` augmented copies; copy `i` uses a seed derived from `(seed, i)`.
pub fn augment_copies(
    graph: &BronchialGraph,
    n: usize,
    seed: u64,
    params: &AugmentParams,
) -> Result<Vec<BronchialGraph>> {
    (0..n as u64)
        .map(|i| augment(graph, crate::synthgen::derive_seed(seed, i), params))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::Dims;

    fn line_chain(n: usize) -> Vec<[f64; 3]> {
        (0..n).map(|i| [i as f64, 0.0, 0.0]).collect()
    }

    #[test]
    fn point_feature_straight_chain() {
        let f = point_feature(&line_chain(10), 10).unwrap();
        assert_eq!(f.len(), 30);
        for i in 0..10 {
            assert!((f[3 * i] - i as f64 / 9.0).abs() < 1e-15);
            assert_eq!(f[3 * i + 1], 0.5);
            assert_eq!(f[3 * i + 2], 0.5);
        }
        let single = point_feature(&[[4.0, 5.0, 6.0]], 10).unwrap();
        assert!(single.iter().all(|&v| v == 0.5));
        assert!(point_feature(&[], 10).is_err());
    }

    #[test]
    fn sample_indices_for_25_voxels() {
        let by_hand: Vec<usize> = (0..10)
            .map(|i| ((i * 24) as f64 / 9.0).round() as usize)
            .collect();
        assert_eq!(by_hand, vec![0, 3, 5, 8, 11, 13, 16, 19, 21, 24]);
        assert_eq!(sample_indices(25, 10), by_hand);
        assert_eq!(sample_indices(3, 5), vec![0, 1, 1, 2, 2]);
    }

    #[test]
    fn voxel_feature_probes() {
        let dims = Dims::new(12, 4, 4);
        let mut feats = FeatureVolume::zeros(dims, 24).unwrap();
        for p in dims.iter().collect::<Vec<_>>() {
            let v = feats.voxel_mut(p);
            v.fill(2.5);
            v[0] = p[0] as f32;
        }
        let chain: Vec<[usize; 3]> = (0..12).map(|x| [x, 1, 2]).collect();
        let f = voxel_feature(&chain, &feats, 10).unwrap();
        assert_eq!(f.len(), 240);
        let xs: Vec<f64> = f.iter().step_by(24).copied().collect();
        let expect: Vec<f64> = sample_indices(12, 10).iter().map(|&i| i as f64).collect();
        assert_eq!(xs, expect);
        assert!(f
            .iter()
            .enumerate()
            .filter(|(i, _)| i % 24 != 0)
            .all(|(_, &v)| v == 2.5));

        let bad = [[12usize, 0, 0]];
        assert!(matches!(
            voxel_feature(&bad, &feats, 10),
            Err(Error::OutOfBounds { .. })
        ));
    }

    fn toy_graph() -> BronchialGraph {
        let segs = SegmentSet {
            segments: vec![
                (0..6).map(|z| [4, 4, z]).collect(),
                (0..5).map(|i| [5 + i, 4, 7 + i]).collect(),
                (0..5).map(|i| [3 - i.min(3), 4, 7 + i]).collect(),
            ],
            junctions: vec![vec![[4, 4, 6]]],
            adjacency: vec![(0, 1), (0, 2), (1, 2)],
        };
        let feats = FeatureVolume::from_vec(
            Dims::cube(12),
            2,
            (0..12usize.pow(3) * 2).map(|i| (i % 7) as f32).collect(),
        )
        .unwrap();
        build_graph(&segs, &feats, Some(&[0, 1, 2]), 10).unwrap()
    }

    #[test]
    fn build_graph_counts_and_label_mismatch() {
        let g = toy_graph();
        assert_eq!(g.n_nodes(), 3);
        assert_eq!(g.edges.len(), 3);
        assert_eq!(g.labels(), Some(vec![0, 1, 2]));

        let one = SegmentSet {
            segments: vec![vec![[1, 1, 1]]],
            junctions: vec![],
            adjacency: vec![],
        };
        let feats = FeatureVolume::zeros(Dims::cube(3), 24).unwrap();
        let g1 = build_graph(&one, &feats, None, 10).unwrap();
        assert_eq!((g1.n_nodes(), g1.edges.len()), (1, 0));
        assert_eq!(g1.nodes[0].point_feat.len(), 30);
        assert_eq!(g1.nodes[0].voxel_feat.len(), 240);
        assert!(build_graph(&one, &feats, Some(&[1, 2]), 10).is_err());
    }

    #[test]
    fn identity_and_translation_augment() {
        let g = toy_graph();
        let same = augment_with(&g, &SpatialTransform::identity()).unwrap();
        assert_eq!(same, g);
        let moved = augment_with(&g, &SpatialTransform::translation([3.5, -2.0, 10.25])).unwrap();
        for (a, b) in moved.nodes.iter().zip(&g.nodes) {
            for (x, y) in a.point_feat.iter().zip(&b.point_feat) {
                assert!((x - y).abs() < 1e-12);
            }
            assert_eq!(a.voxel_feat, b.voxel_feat);
        }
    }

    #[test]
    fn augment_is_seeded_and_preserves_topology() {
        let g = toy_graph();
        let p = AugmentParams::default();
        let a = augment(&g, 42, &p).unwrap();
        let b = augment(&g, 42, &p).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, augment(&g, 43, &p).unwrap());
        assert_eq!(a.edges, g.edges);
        for (x, y) in a.nodes.iter().zip(&g.nodes) {
            assert_eq!(x.label, y.label);
            assert_eq!(x.voxel_feat, y.voxel_feat);
            assert!(x.point_feat.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let copies = augment_copies(&g, 99, 7, &p).unwrap();
        assert_eq!(copies.len() + 1, 100);
    }

    #[test]
    fn json_round_trip_within_tolerance() {
        let mut g = toy_graph();
        g.nodes[1].point_feat[4] = 0.123456789123;
        g.nodes[2].voxel_feat[0] = -1234.56789012345;
        let text = g.to_json().unwrap();
        let back = BronchialGraph::from_json(&text).unwrap();
        for (a, b) in back.nodes.iter().zip(&g.nodes) {
            for (x, y) in a
                .point_feat
                .iter()
                .chain(&a.voxel_feat)
                .zip(b.point_feat.iter().chain(&b.voxel_feat))
            {
                assert!((x - y).abs() <= 1e-7 * y.abs().max(1.0), "{x} vs {y}");
            }
            assert_eq!(a.chain, b.chain);
        }
        // 9 significant digits
        assert!(text.contains("0.123456789,"), "{text}");
    }

    #[test]
    fn malformed_json_names_field() {
        let err = BronchialGraph::from_json(
            r#"{"nodes":[{"id":0,"chain":[[0,0,0]],"point_feat":"x","voxel_feat":[]}],"edges":[]}"#,
        )
        .unwrap_err();
        assert!(err.contains("nodes[0].point_feat"), "{err}");
        let err = BronchialGraph::from_json(r#"{"nodes":[],"edges":[[0,1]]}"#).unwrap_err();
        assert!(err.contains("edge"), "{err}");
    }
}
