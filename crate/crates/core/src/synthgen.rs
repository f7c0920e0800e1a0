//! Deterministic synthetic bronchial trees with ground truth at every
//! pipeline stage: CT-like intensities, the airway mask, per-branch
//! centerlines and class ids, and an analytic descriptor feature volume.
//!
//! Trees grow downward (decreasing z) from a root tube near the top of the
//! volume. Each branch is a capsule (all points within `radius` of a
//! straight axis). Lumen contrast fades with generation to mimic partial
//! volume effects in small airways, so only the root survives an Otsu
//! threshold.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::brongraph::OTHER_CLASS;
use crate::error::{Error, Result};
use crate::io;
use crate::volgrid::{Dims, FeatureVolume, Mask, Volume, DEFAULT_CHANNELS};

/// splitmix64 finaliser over `(seed, stream)`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub depth: usize,
    pub branching: usize,
    pub radius_decay: f64,
    pub root_radius: f64,
    /// Edge length of the cubic volume.
    pub volume: usize,
    /// Root length as a fraction of the volume edge.
    pub root_length_frac: f64,
    pub length_decay: f64,
    pub branch_angle_deg: f64,
    pub angle_jitter_deg: f64,
    pub air_hu: f64,
    pub air_spread: f64,
    pub tissue_hu: f64,
    pub tissue_spread: f64,
    /// Lumen contrast of generation-1 branches relative to the root.
    pub small_airway_contrast: f64,
    /// Generations up to this one carry their own class; deeper branches
    /// inherit the class of their ancestor at this generation.
    pub labeled_generations: usize,
    pub channels: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            depth: 4,
            branching: 2,
            radius_decay: 0.7,
            root_radius: 3.0,
            volume: 64,
            root_length_frac: 0.25,
            length_decay: 0.8,
            branch_angle_deg: 35.0,
            angle_jitter_deg: 8.0,
            air_hu: -900.0,
            air_spread: 30.0,
            tissue_hu: -100.0,
            tissue_spread: 50.0,
            small_airway_contrast: 0.2,
            labeled_generations: 2,
            channels: DEFAULT_CHANNELS,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if self.depth == 0 || self.branching == 0 {
            return bad("depth and branching must be >= 1");
        }
        if self.volume < 8 {
            return bad("volume edge must be >= 8");
        }
        if self.volume <= 64 && self.depth > 5 {
            return bad("depth must be <= 5 for volumes up to 64^3");
        }
        if !(self.root_radius > 0.0) || !(0.0..=1.0).contains(&self.radius_decay) {
            return bad("root radius must be positive and radius decay in [0, 1]");
        }
        if self.channels == 0 {
            return bad("channels must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRecord {
    pub id: usize,
    pub parent: Option<usize>,
    pub generation: usize,
    /// Position among the parent's children.
    pub child_index: usize,
    pub class_id: usize,
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub radius: f64,
    /// The axis hit the volume border and was shortened.
    pub truncated: bool,
    /// Rasterised axis, start to end.
    pub centerline: Vec<[usize; 3]>,
}

impl BranchRecord {
    pub fn length(&self) -> f64 {
        dist(self.start, self.end)
    }

    pub fn direction(&self) -> [f64; 3] {
        normalize(sub(self.end, self.start))
    }

    /// Distance from `p` to the axis and the clamped axial parameter.
    pub fn axis_distance(&self, p: [f64; 3]) -> (f64, f64) {
        let d = sub(self.end, self.start);
        let len2 = dot(d, d);
        let t = if len2 > 0.0 {
            (dot(sub(p, self.start), d) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let q = [
            self.start[0] + t * d[0],
            self.start[1] + t * d[1],
            self.start[2] + t * d[2],
        ];
        (dist(p, q), t)
    }
}

/// Heap-style index of a branch: root 0, child `c` of `h` is `h b + 1 + c`.
fn heap_index(parent_heap: Option<usize>, child_index: usize, branching: usize) -> usize {
    match parent_heap {
        None => 0,
        Some(h) => h * branching + 1 + child_index,
    }
}

/// Class rule: the heap index of the branch's ancestor at generation
/// `min(generation, labeled_generations)`, mapped to "other" when it
/// exceeds the segmental class range.
pub fn derive_class_ids(branches: &[BranchRecord], params: &SynthParams) -> Vec<usize> {
    let mut heap = vec![0usize; branches.len()];
    let mut class = vec![0usize; branches.len()];
    for b in branches {
        heap[b.id] = heap_index(b.parent.map(|p| heap[p]), b.child_index, params.branching);
        class[b.id] = if b.generation <= params.labeled_generations {
            if heap[b.id] < OTHER_CLASS {
                heap[b.id]
            } else {
                OTHER_CLASS
            }
        } else {
            class[b.parent.expect("non-root branch has a parent")]
        };
    }
    class
}

#[derive(Debug, Clone)]
pub struct SyntheticCase {
    pub seed: u64,
    pub params: SynthParams,
    pub ct: Volume<f32>,
    pub gt_mask: Mask,
    pub branches: Vec<BranchRecord>,
    pub descriptor_feats: FeatureVolume,
}

impl SyntheticCase {
    pub fn dims(&self) -> Dims {
        self.gt_mask.dims()
    }

    /// Branch id owning each mask voxel (nearest axis), `None` outside.
    pub fn branch_map(&self) -> Volume<Option<usize>> {
        let dims = self.dims();
        Volume::from_fn(dims, |p| {
            if self.gt_mask.get(p) {
                nearest_branch(&self.branches, p)
            } else {
                None
            }
        })
    }

    /// Voxels of every branch's generating centerline, deduplicated.
    pub fn centerline_mask(&self) -> Mask {
        let mut m = Mask::empty(self.dims());
        for b in &self.branches {
            for &p in &b.centerline {
                m.set(p, true);
            }
        }
        m
    }
}

/// Branch whose axis is nearest to voxel `p`; ties go to the lower id.
pub fn nearest_branch(branches: &[BranchRecord], p: [usize; 3]) -> Option<usize> {
    let pf = p.map(|c| c as f64);
    branches
        .iter()
        .map(|b| (b.axis_distance(pf).0, b.id))
        .fold(None, |best: Option<(f64, usize)>, cur| match best {
            Some(b) if b.0 <= cur.0 => Some(b),
            _ => Some(cur),
        })
        .map(|(_, id)| id)
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = sub(a, b);
    dot(d, d).sqrt()
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    if n > 0.0 {
        a.map(|c| c / n)
    } else {
        a
    }
}

fn rasterize_axis(start: [f64; 3], end: [f64; 3], dims: Dims) -> Vec<[usize; 3]> {
    let steps = (dist(start, end) * 10.0).ceil().max(1.0) as usize;
    let lim = dims.as_array();
    let mut out: Vec<[usize; 3]> = Vec::new();
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let p: [usize; 3] = std::array::from_fn(|a| {
            (start[a] + t * (end[a] - start[a]))
                .round()
                .clamp(0.0, (lim[a] - 1) as f64) as usize
        });
        if out.last() != Some(&p) {
            out.push(p);
        }
    }
    out
}

/// Clips the axis so the capsule stays one voxel clear of the border.
fn clip_axis(start: [f64; 3], end: [f64; 3], radius: f64, dims: Dims) -> ([f64; 3], bool) {
    let lim = dims.as_array();
    let margin = radius + 1.0;
    let mut t_max: f64 = 1.0;
    for a in 0..3 {
        let (lo, hi) = (margin, lim[a] as f64 - 1.0 - margin);
        let d = end[a] - start[a];
        if end[a] < lo && d != 0.0 {
            t_max = t_max.min((lo - start[a]) / d);
        }
        if end[a] > hi && d != 0.0 {
            t_max = t_max.min((hi - start[a]) / d);
        }
    }
    let t = t_max.max(0.0);
    if t < 1.0 {
        (
            std::array::from_fn(|a| start[a] + t * (end[a] - start[a])),
            true,
        )
    } else {
        (end, false)
    }
}

fn grow_tree(params: &SynthParams, dims: Dims, rng: &mut ChaCha8Rng) -> Vec<BranchRecord> {
    let c = [(dims.nx / 2) as f64, (dims.ny / 2) as f64];
    let root_start = [c[0], c[1], dims.nz as f64 - 1.0 - params.root_radius.ceil()];
    let root_len = params.root_length_frac * params.volume as f64;
    let mut branches: Vec<BranchRecord> = Vec::new();
    // (parent id, start, parent direction, length, radius, generation, child index, roll)
    let mut pending = vec![(
        None,
        root_start,
        [0.0, 0.0, -1.0],
        root_len,
        params.root_radius,
        0usize,
        0usize,
        0.0,
    )];
    let jitter = params.angle_jitter_deg.to_radians();
    let spread = params.branch_angle_deg.to_radians();

    while !pending.is_empty() {
        let mut next = Vec::new();
        for (parent, start, dir, len, radius, generation, child_index, _) in pending {
            let (end, truncated) = clip_axis(
                start,
                [
                    start[0] + len * dir[0],
                    start[1] + len * dir[1],
                    start[2] + len * dir[2],
                ],
                radius,
                dims,
            );
            let id = branches.len();
            branches.push(BranchRecord {
                id,
                parent,
                generation,
                child_index,
                class_id: 0,
                start,
                end,
                radius,
                truncated,
                centerline: rasterize_axis(start, end, dims),
            });
            if truncated || generation + 1 >= params.depth {
                continue;
            }
            // split plane alternates between x-ish and y-ish per generation
            let reference = if generation % 2 == 0 {
                [1.0, 0.0, 0.0]
            } else {
                [0.0, 1.0, 0.0]
            };
            let u = normalize(sub(reference, dir.map(|d| d * dot(reference, dir))));
            let v = cross(dir, u);
            for k in 0..params.branching {
                let phi = 2.0 * PI * k as f64 / params.branching as f64
                    + rng.random_range(-jitter..=jitter);
                let theta = spread + rng.random_range(-jitter..=jitter);
                let perp: [f64; 3] = std::array::from_fn(|a| phi.cos() * u[a] + phi.sin() * v[a]);
                let child_dir = normalize(std::array::from_fn(|a| {
                    theta.cos() * dir[a] + theta.sin() * perp[a]
                }));
                let child_len = len * params.length_decay * rng.random_range(0.9..=1.1);
                next.push((
                    Some(id),
                    end,
                    child_dir,
                    child_len,
                    radius * params.radius_decay,
                    generation + 1,
                    k,
                    phi,
                ));
            }
        }
        pending = next;
    }
    let classes = derive_class_ids(&branches, params);
    for (b, c) in branches.iter_mut().zip(classes) {
        b.class_id = c;
    }
    branches
}

/// Base descriptor of a voxel owned by `b`: radius, tangent, path distance
/// from the root start.
fn base_descriptor(
    branches: &[BranchRecord],
    b: &BranchRecord,
    p: [usize; 3],
    params: &SynthParams,
) -> [f64; 5] {
    let (_, t) = b.axis_distance(p.map(|c| c as f64));
    let mut path = t * b.length();
    let mut cur = b.parent;
    while let Some(pid) = cur {
        path += branches[pid].length();
        cur = branches[pid].parent;
    }
    let tan = b.direction();
    [
        b.radius / params.root_radius,
        tan[0],
        tan[1],
        tan[2],
        path / params.volume as f64,
    ]
}

/// Expands 5 base values to `channels` values: raw, sin, cos and square of
/// each base value, an inside flag, and three tangent products; repeated
/// cyclically beyond 24 channels.
fn expand_descriptor(base: [f64; 5], out: &mut [f32]) {
    let mut full = [0.0f64; DEFAULT_CHANNELS];
    for (i, &v) in base.iter().enumerate() {
        full[i] = v;
        full[5 + i] = (PI * v).sin();
        full[10 + i] = (PI * v).cos();
        full[15 + i] = v * v;
    }
    full[20] = 1.0;
    full[21] = base[1] * base[3];
    full[22] = base[2] * base[3];
    full[23] = base[1] * base[2];
    for (c, o) in out.iter_mut().enumerate() {
        *o = full[c % DEFAULT_CHANNELS] as f32;
    }
}

pub fn generate_case(seed: u64, params: &SynthParams) -> Result<SyntheticCase> {
    params.validate()?;
    let dims = Dims::cube(params.volume);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let branches = grow_tree(params, dims, &mut rng);

    let mut gt_mask = Mask::empty(dims);
    for b in &branches {
        let lo: [usize; 3] = std::array::from_fn(|a| {
            (b.start[a].min(b.end[a]) - b.radius).floor().max(0.0) as usize
        });
        let hi: [usize; 3] = std::array::from_fn(|a| {
            ((b.start[a].max(b.end[a]) + b.radius).ceil() as usize).min(dims.as_array()[a] - 1)
        });
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    if b.axis_distance([x as f64, y as f64, z as f64]).0 <= b.radius {
                        gt_mask.set([x, y, z], true);
                    }
                }
            }
        }
        for &p in &b.centerline {
            gt_mask.set(p, true);
        }
    }

    let mut ct = Volume::filled(dims, 0.0f32);
    let mut feats = FeatureVolume::zeros(dims, params.channels)?;
    for i in 0..dims.len() {
        let p = dims.coords(i);
        let value = if gt_mask.get(p) {
            let b = &branches[nearest_branch(&branches, p).expect("tree has a root")];
            expand_descriptor(base_descriptor(&branches, b, p, params), feats.voxel_mut(p));
            let contrast = if b.generation == 0 {
                1.0
            } else {
                params.small_airway_contrast * 0.85f64.powi(b.generation as i32 - 1)
            };
            params.tissue_hu
                + contrast * (params.air_hu - params.tissue_hu)
                + rng.random_range(-params.air_spread..=params.air_spread)
        } else {
            params.tissue_hu + rng.random_range(-params.tissue_spread..=params.tissue_spread)
        };
        ct.data_mut()[i] = value as f32;
    }

    Ok(SyntheticCase {
        seed,
        params: params.clone(),
        ct,
        gt_mask,
        branches,
        descriptor_feats: feats,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseSpec {
    pub id: usize,
    pub seed: u64,
}

impl CaseSpec {
    pub fn name(&self) -> String {
        format!("case_{:04}", self.id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub master_seed: u64,
    pub train: Vec<CaseSpec>,
    pub test: Vec<CaseSpec>,
}

/// Deterministic train/test split of `n_cases` case seeds derived from
/// `seed`. The first `round(n * train_fraction)` cases of a seeded
/// shuffle go to training.
pub fn generate_dataset(n_cases: usize, seed: u64, train_fraction: f64) -> Result<DatasetSplit> {
    if n_cases < 2 {
        return Err(Error::InvalidInput(
            "a dataset needs at least two cases".into(),
        ));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::InvalidInput(
            "train fraction must be in [0, 1]".into(),
        ));
    }
    let mut specs: Vec<CaseSpec> = (0..n_cases)
        .map(|id| CaseSpec {
            id,
            seed: derive_seed(seed, id as u64),
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    for i in (1..specs.len()).rev() {
        let j = rng.random_range(0..=i);
        specs.swap(i, j);
    }
    let n_train = (n_cases as f64 * train_fraction).round() as usize;
    let test = specs.split_off(n_train);
    let mut train = specs;
    train.sort_by_key(|s| s.id);
    let mut test = test;
    test.sort_by_key(|s| s.id);
    Ok(DatasetSplit {
        master_seed: seed,
        train,
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseTruth {
    pub seed: u64,
    pub params: SynthParams,
    pub branches: Vec<BranchRecord>,
}

/// Writes `ct`, `mask`, `feats` header/raw pairs and `truth.json` into `dir`.
pub fn write_case(case: &SyntheticCase, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    io::write_intensity(&dir.join("ct.json"), &case.ct)?;
    io::write_mask(&dir.join("mask.json"), &case.gt_mask)?;
    io::write_features(&dir.join("feats.json"), &case.descriptor_feats)?;
    let truth = CaseTruth {
        seed: case.seed,
        params: case.params.clone(),
        branches: case.branches.clone(),
    };
    io::write_json(&dir.join("truth.json"), &truth)
}

pub fn read_case(dir: &Path) -> Result<SyntheticCase> {
    let truth: CaseTruth = io::read_json(&dir.join("truth.json"))?;
    let ct = io::read_intensity(&dir.join("ct.json"))?;
    let gt_mask = io::read_mask(&dir.join("mask.json"))?;
    let descriptor_feats = io::read_features(&dir.join("feats.json"))?;
    if ct.dims() != gt_mask.dims() || descriptor_feats.dims() != gt_mask.dims() {
        return Err(Error::format(dir, "case volumes disagree on dims"));
    }
    Ok(SyntheticCase {
        seed: truth.seed,
        params: truth.params,
        ct,
        gt_mask,
        branches: truth.branches,
        descriptor_feats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ahr::hard_region;
    use crate::volgrid::{main_trachea, otsu_threshold};

    #[test]
    fn generation_is_deterministic() {
        let p = SynthParams {
            volume: 32,
            depth: 3,
            root_radius: 2.0,
            ..Default::default()
        };
        let a = generate_case(0, &p).unwrap();
        let b = generate_case(0, &p).unwrap();
        assert_eq!(a.ct, b.ct);
        assert_eq!(a.gt_mask, b.gt_mask);
        assert_eq!(a.branches, b.branches);
        assert_eq!(a.descriptor_feats, b.descriptor_feats);
        let c = generate_case(1, &p).unwrap();
        assert_ne!(a.ct, c.ct);
    }

    #[test]
    fn branch_counts_and_classes() {
        let p = SynthParams {
            depth: 3,
            ..Default::default()
        };
        let case = generate_case(5, &p).unwrap();
        assert_eq!(case.branches.len(), 7);
        assert!(case.branches.iter().all(|b| !b.truncated));
        let gens: Vec<usize> = case.branches.iter().map(|b| b.generation).collect();
        assert_eq!(gens, vec![0, 1, 1, 2, 2, 2, 2]);
        let stored: Vec<usize> = case.branches.iter().map(|b| b.class_id).collect();
        assert_eq!(stored, derive_class_ids(&case.branches, &p));
        assert_eq!(stored, vec![0, 1, 2, 3, 4, 5, 6]);

        let deep = generate_case(5, &SynthParams::default()).unwrap();
        assert_eq!(deep.branches.len(), 15);
        for b in deep.branches.iter().filter(|b| b.generation == 3) {
            assert_eq!(b.class_id, deep.branches[b.parent.unwrap()].class_id);
        }
    }

    #[test]
    fn centerlines_inside_mask_and_descriptors_inside_only() {
        let case = generate_case(2, &SynthParams::default()).unwrap();
        for b in &case.branches {
            assert!(b.centerline.iter().all(|&p| case.gt_mask.get(p)));
            for w in b.centerline.windows(2) {
                assert!((0..3).all(|a| w[0][a].abs_diff(w[1][a]) <= 1));
            }
        }
        let dims = case.dims();
        for p in dims.iter().step_by(97) {
            let f = case.descriptor_feats.voxel(p);
            if case.gt_mask.get(p) {
                assert_eq!(f[20], 1.0);
            } else {
                assert!(f.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn otsu_isolates_the_root_tube() {
        for seed in 0..3 {
            let case = generate_case(seed, &SynthParams::default()).unwrap();
            let (_, air) = otsu_threshold(&case.ct).unwrap();
            let trachea = main_trachea(&air).unwrap();
            let owner = case.branch_map();
            for p in case.dims().iter() {
                match owner.get(p) {
                    Some(0) => assert!(trachea.get(p), "root voxel {p:?} missing"),
                    Some(_) => assert!(!trachea.get(p), "branch voxel {p:?} in trachea"),
                    None => {}
                }
            }
            let hr = hard_region(&case.gt_mask, &trachea).unwrap();
            assert!(!hr.is_empty_mask());
            for p in case.dims().iter() {
                if owner.get(p).is_some_and(|b| b > 0) {
                    assert!(hr.get(p));
                }
            }
        }
    }

    #[test]
    fn dataset_split_counts() {
        let s = generate_dataset(10, 3, 0.7).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (7, 3));
        assert_eq!(s, generate_dataset(10, 3, 0.7).unwrap());
        let ids: std::collections::BTreeSet<usize> =
            s.train.iter().chain(&s.test).map(|c| c.id).collect();
        assert_eq!(ids.len(), 10);
        let big = generate_dataset(100, 0, 0.7).unwrap();
        assert_eq!((big.train.len(), big.test.len()), (70, 30));
        assert!(generate_dataset(1, 0, 0.7).is_err());
    }

    #[test]
    fn case_round_trip_on_disk() {
        let p = SynthParams {
            volume: 16,
            depth: 2,
            root_radius: 1.5,
            ..Default::default()
        };
        let case = generate_case(9, &p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_case(&case, dir.path()).unwrap();
        let back = read_case(dir.path()).unwrap();
        assert_eq!(back.ct, case.ct);
        assert_eq!(back.gt_mask, case.gt_mask);
        assert_eq!(back.descriptor_feats, case.descriptor_feats);
        assert_eq!(back.branches, case.branches);
    }
}
