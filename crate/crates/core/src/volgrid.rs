//! Dense 3D volumes and the morphology / statistics primitives used by
//! every later stage.
//!
//! Volumes are row-major with x fastest: `index = x + nx * (y + ny * z)`.
//! Binary masks are `Volume<bool>`, which makes the {0,1} invariant
//! structural rather than checked.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel counts along x, y and z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub fn cube(n: usize) -> Self {
        Self::new(n, n, n)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn index_of(&self, p: [usize; 3]) -> usize {
        self.index(p[0], p[1], p[2])
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.nx;
        let y = (i / self.nx) % self.ny;
        let z = i / (self.nx * self.ny);
        [x, y, z]
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        p[0] < self.nx && p[1] < self.ny && p[2] < self.nz
    }

    /// Signed-offset lookup; `None` when the shifted voxel leaves the grid.
    #[inline]
    pub fn offset(&self, p: [usize; 3], d: [i64; 3]) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        let lim = self.as_array();
        for a in 0..3 {
            let v = p[a] as i64 + d[a];
            if v < 0 || v >= lim[a] as i64 {
                return None;
            }
            out[a] = v as usize;
        }
        Some(out)
    }

    /// `ceil(dim / 2)` per axis, never below 1.
    pub fn halved(&self) -> Dims {
        Dims::new(
            self.nx.div_ceil(2).max(1),
            self.ny.div_ceil(2).max(1),
            self.nz.div_ceil(2).max(1),
        )
    }

    /// Iterates all voxel coordinates in storage order.
    pub fn iter(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        (0..self.len()).map(move |i| self.coords(i))
    }
}

/// The 26 neighbour offsets of a voxel, in z-major / x-fastest order.
pub const NEIGHBORS_26: [[i64; 3]; 26] = {
    let mut out = [[0i64; 3]; 26];
    let mut n = 0;
    let mut dz = -1;
    while dz <= 1 {
        let mut dy = -1;
        while dy <= 1 {
            let mut dx = -1;
            while dx <= 1 {
                if !(dx == 0 && dy == 0 && dz == 0) {
                    out[n] = [dx, dy, dz];
                    n += 1;
                }
                dx += 1;
            }
            dy += 1;
        }
        dz += 1;
    }
    out
};

/// The 6 face-neighbour offsets.
pub const NEIGHBORS_6: [[i64; 3]; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

/// Dense 3D grid of values.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    dims: Dims,
    data: Vec<T>,
}

/// Binary volume.
pub type Mask = Volume<bool>;

impl<T: Copy> Volume<T> {
    pub fn filled(dims: Dims, value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::DimMismatch(format!(
                "data length {} does not match dims {:?} ({} voxels)",
                data.len(),
                dims.as_array(),
                dims.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut([usize; 3]) -> T) -> Self {
        let data = (0..dims.len()).map(|i| f(dims.coords(i))).collect();
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, p: [usize; 3]) -> T {
        self.data[self.dims.index_of(p)]
    }

    #[inline]
    pub fn set(&mut self, p: [usize; 3], v: T) {
        let i = self.dims.index_of(p);
        self.data[i] = v;
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Volume<U> {
        Volume {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Extracts the sub-block starting at `origin` with extent `size`.
    pub fn crop(&self, origin: [usize; 3], size: Dims) -> Volume<T> {
        Volume::from_fn(size, |p| {
            self.get([origin[0] + p[0], origin[1] + p[1], origin[2] + p[2]])
        })
    }

    pub(crate) fn ensure_same_dims<U>(&self, other: &Volume<U>, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.dims.as_array(),
                other.dims.as_array()
            )));
        }
        Ok(())
    }
}

impl Mask {
    pub fn empty(dims: Dims) -> Self {
        Self::filled(dims, false)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Foreground voxel coordinates in storage order.
    pub fn foreground(&self) -> Vec<[usize; 3]> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| self.dims.coords(i))
            .collect()
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dims == other.dims && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn and_not(&self, other: &Mask) -> Result<Mask> {
        self.ensure_same_dims(other, "set difference")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a && !b)
            .collect();
        Ok(Mask {
            dims: self.dims,
            data,
        })
    }

    /// Number of foreground voxels in the 26-neighbourhood of `p`.
    pub fn neighbor_count26(&self, p: [usize; 3]) -> usize {
        NEIGHBORS_26
            .iter()
            .filter(|&&d| self.dims.offset(p, d).is_some_and(|q| self.get(q)))
            .count()
    }
}

/// Multi-channel volume, channels contiguous per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    dims: Dims,
    channels: usize,
    data: Vec<f32>,
}

pub const DEFAULT_CHANNELS: usize = 24;

impl FeatureVolume {
    pub fn zeros(dims: Dims, channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidInput(
                "feature volume needs at least one channel".into(),
            ));
        }
        Ok(Self {
            dims,
            channels,
            data: vec![0.0; dims.len() * channels],
        })
    }

    pub fn from_vec(dims: Dims, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidInput(
                "feature volume needs at least one channel".into(),
            ));
        }
        if data.len() != dims.len() * channels {
            return Err(Error::DimMismatch(format!(
                "feature data length {} != {} voxels x {} channels",
                data.len(),
                dims.len(),
                channels
            )));
        }
        Ok(Self {
            dims,
            channels,
            data,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn voxel(&self, p: [usize; 3]) -> &[f32] {
        let i = self.dims.index_of(p) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn voxel_mut(&mut self, p: [usize; 3]) -> &mut [f32] {
        let i = self.dims.index_of(p) * self.channels;
        &mut self.data[i..i + self.channels]
    }
}

const OTSU_BINS: usize = 256;

/// Otsu threshold over a 256-bin histogram spanning the observed range.
///
/// Returns the threshold and the low-intensity (air) class mask
/// `intensity <= threshold`. Ties in between-class variance resolve to the
/// lower threshold.
pub fn otsu_threshold(vol: &Volume<f32>) -> Result<(f64, Mask)> {
    let (lo, hi) = vol
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        });
    if vol.data().is_empty() || lo >= hi {
        return Err(Error::DegenerateHistogram);
    }
    let width = (hi - lo) / OTSU_BINS as f64;
    let mut hist = [0u64; OTSU_BINS];
    for &v in vol.data() {
        let b = (((v as f64 - lo) / width) as usize).min(OTSU_BINS - 1);
        hist[b] += 1;
    }

    let total = vol.data().len() as f64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let (mut w0, mut sum0) = (0.0f64, 0.0f64);
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (k, &c) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w0 += c as f64;
        sum0 += k as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if between > best.0 {
            best = (between, k);
        }
    }

    let threshold = lo + (best.1 + 1) as f64 * width;
    let mask = vol.map(|v| (v as f64) <= threshold);
    Ok((threshold, mask))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Six,
    TwentySix,
}

impl Connectivity {
    fn offsets(self) -> &'static [[i64; 3]] {
        match self {
            Connectivity::Six => &NEIGHBORS_6,
            Connectivity::TwentySix => &NEIGHBORS_26,
        }
    }
}

/// Connected-component labelling result.
#[derive(Debug, Clone)]
pub struct Components {
    /// 0 is background; components are numbered 1.. in order of their
    /// first voxel in storage order.
    pub labels: Volume<u32>,
    /// `sizes[l - 1]` is the voxel count of component `l`.
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

pub fn connected_components(mask: &Mask, connectivity: Connectivity) -> Components {
    let dims = mask.dims();
    let mut labels = Volume::filled(dims, 0u32);
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..dims.len() {
        if !mask.data()[start] || labels.data()[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        labels.data_mut()[start] = label;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let p = dims.coords(i);
            for &d in connectivity.offsets() {
                if let Some(q) = dims.offset(p, d) {
                    let j = dims.index_of(q);
                    if mask.data()[j] && labels.data()[j] == 0 {
                        labels.data_mut()[j] = label;
                        queue.push_back(j);
                    }
                }
            }
        }
        sizes.push(size);
    }
    Components { labels, sizes }
}

/// First z index of the top axial slab (the upper 10% of z).
pub fn top_slab_start(dims: Dims) -> usize {
    dims.nz - dims.nz.div_ceil(10).max(1)
}

/// Selects the 26-connected component with the largest overlap with the
/// top 10% z-slab. Ties go to the lower component label.
pub fn main_trachea(mask: &Mask) -> Result<Mask> {
    let comps = connected_components(mask, Connectivity::TwentySix);
    let dims = mask.dims();
    let z0 = top_slab_start(dims);
    let mut hits = vec![0usize; comps.count() + 1];
    for (i, &l) in comps.labels.data().iter().enumerate() {
        if l != 0 && dims.coords(i)[2] >= z0 {
            hits[l as usize] += 1;
        }
    }
    let (best, &n) =
        hits.iter().enumerate().skip(1).fold(
            (0, &0),
            |acc, (l, n)| if *n > *acc.1 { (l, n) } else { acc },
        );
    if n == 0 {
        return Err(Error::NoTracheaCandidate);
    }
    Ok(comps.labels.map(|l| l as usize == best))
}

/// Stride-2 max pooling with a 2x2x2 window; blocks at odd borders are
/// truncated, so output dims are `ceil(dim / 2)`.
pub fn maxpool_stride2(mask: &Mask) -> Mask {
    let src = mask.dims();
    let out_dims = src.halved();
    let mut out = Mask::empty(out_dims);
    for (i, &b) in mask.data().iter().enumerate() {
        if b {
            let [x, y, z] = src.coords(i);
            out.set([x / 2, y / 2, z / 2], true);
        }
    }
    out
}

/// 3x3x3 max filter with zero padding.
pub fn dilate26(mask: &Mask) -> Mask {
    let dims = mask.dims();
    let mut out = mask.clone();
    for (i, &b) in mask.data().iter().enumerate() {
        if b {
            let p = dims.coords(i);
            for &d in &NEIGHBORS_26 {
                if let Some(q) = dims.offset(p, d) {
                    out.set(q, true);
                }
            }
        }
    }
    out
}

fn tile_starts(dim: usize, cube: usize, stride: usize) -> Vec<usize> {
    let mut starts = vec![0];
    let mut s = 0;
    while s + cube < dim {
        s = (s + stride).min(dim - cube);
        starts.push(s);
    }
    starts
}

/// Tiles `vol` with cubes of `cube` voxels overlapping by `overlap`, runs
/// `predictor(tile, origin)` on each, and averages scores where tiles
/// overlap. The final tile on each axis is clamped to the border.
pub fn sliding_window_apply<F>(
    vol: &Volume<f64>,
    cube: [usize; 3],
    overlap: [usize; 3],
    mut predictor: F,
) -> Result<Volume<f64>>
where
    F: FnMut(&Volume<f64>, [usize; 3]) -> Volume<f64>,
{
    let dims = vol.dims().as_array();
    for a in 0..3 {
        if cube[a] == 0 || cube[a] > dims[a] {
            return Err(Error::InvalidInput(format!(
                "cube {:?} does not fit volume {:?}",
                cube, dims
            )));
        }
        if overlap[a] >= cube[a] {
            return Err(Error::InvalidInput(format!(
                "overlap {:?} must be < cube {:?}",
                overlap, cube
            )));
        }
    }
    let cube_dims = Dims::new(cube[0], cube[1], cube[2]);
    let starts: Vec<Vec<usize>> = (0..3)
        .map(|a| tile_starts(dims[a], cube[a], cube[a] - overlap[a]))
        .collect();

    let mut acc = Volume::filled(vol.dims(), 0.0f64);
    let mut hits = Volume::filled(vol.dims(), 0u32);
    for &z0 in &starts[2] {
        for &y0 in &starts[1] {
            for &x0 in &starts[0] {
                let origin = [x0, y0, z0];
                let tile = vol.crop(origin, cube_dims);
                let scores = predictor(&tile, origin);
                if scores.dims() != cube_dims {
                    return Err(Error::DimMismatch(format!(
                        "predictor returned {:?} for a {:?} tile",
                        scores.dims().as_array(),
                        cube
                    )));
                }
                for (i, &s) in scores.data().iter().enumerate() {
                    let [x, y, z] = cube_dims.coords(i);
                    let p = [x0 + x, y0 + y, z0 + z];
                    let j = vol.dims().index_of(p);
                    acc.data_mut()[j] += s;
                    hits.data_mut()[j] += 1;
                }
            }
        }
    }
    let data = acc
        .data()
        .iter()
        .zip(hits.data())
        .map(|(&s, &n)| s / n as f64)
        .collect();
    Volume::from_vec(vol.dims(), data)
}
