//! Centerline extraction by topology-preserving thinning, 26-neighbourhood
//! point classification, and splitting of the centerline into segments at
//! division points.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::{connected_components, Connectivity, Dims, Mask, Volume, NEIGHBORS_26};

/// A thinned binary volume. Construction goes through [`skeletonize`] or
/// [`Skeleton::from_mask`], which rejects fully occupied 2x2x2 blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    mask: Mask,
}

impl Skeleton {
    pub fn from_mask(mask: Mask) -> Result<Self> {
        if let Some(p) = first_full_block(&mask) {
            return Err(Error::InvalidInput(format!(
                "mask is not thin: full 2x2x2 block at {p:?}"
            )));
        }
        Ok(Self { mask })
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn into_mask(self) -> Mask {
        self.mask
    }

    pub fn voxel_count(&self) -> usize {
        self.mask.count()
    }
}

fn first_full_block(mask: &Mask) -> Option<[usize; 3]> {
    let d = mask.dims();
    if d.nx < 2 || d.ny < 2 || d.nz < 2 {
        return None;
    }
    for z in 0..d.nz - 1 {
        for y in 0..d.ny - 1 {
            for x in 0..d.nx - 1 {
                let full =
                    (0..8).all(|k| mask.get([x + (k & 1), y + ((k >> 1) & 1), z + (k >> 2)]));
                if full {
                    return Some([x, y, z]);
                }
            }
        }
    }
    None
}

/// Index into a 3x3x3 neighbourhood cube; the centre is 13.
#[inline]
fn cube_index(d: [i64; 3]) -> usize {
    ((d[0] + 1) + 3 * (d[1] + 1) + 9 * (d[2] + 1)) as usize
}

const CENTER: usize = 13;

struct CubeTopology {
    adj26: Vec<Vec<usize>>,
    adj6: Vec<Vec<usize>>,
    in18: [bool; 27],
    face: [bool; 27],
}

impl CubeTopology {
    fn new() -> Self {
        let offs: Vec<[i64; 3]> = (0..27)
            .map(|i| {
                [
                    (i % 3) as i64 - 1,
                    ((i / 3) % 3) as i64 - 1,
                    (i / 9) as i64 - 1,
                ]
            })
            .collect();
        let mut adj26 = vec![Vec::new(); 27];
        let mut adj6 = vec![Vec::new(); 27];
        let mut in18 = [false; 27];
        let mut face = [false; 27];
        for i in 0..27 {
            let nz = offs[i].iter().filter(|&&c| c != 0).count();
            in18[i] = (1..=2).contains(&nz);
            face[i] = nz == 1;
            for j in 0..27 {
                if i == j || i == CENTER || j == CENTER {
                    continue;
                }
                let d: Vec<i64> = (0..3).map(|a| (offs[i][a] - offs[j][a]).abs()).collect();
                if d.iter().all(|&c| c <= 1) {
                    adj26[i].push(j);
                }
                if d.iter().sum::<i64>() == 1 {
                    adj6[i].push(j);
                }
            }
        }
        Self {
            adj26,
            adj6,
            in18,
            face,
        }
    }

    /// (26, 6) simple-point test on a neighbourhood cube (centre ignored):
    /// exactly one 26-component of foreground among the 26 neighbours, and
    /// exactly one 6-component of background within the 18-neighbourhood
    /// that is 6-adjacent to the centre.
    fn is_simple(&self, cube: &[bool; 27]) -> bool {
        let mut seen = [false; 27];
        let mut stack = Vec::with_capacity(27);
        let mut fg_components = 0;
        for s in 0..27 {
            if s == CENTER || !cube[s] || seen[s] {
                continue;
            }
            fg_components += 1;
            if fg_components > 1 {
                return false;
            }
            seen[s] = true;
            stack.push(s);
            while let Some(i) = stack.pop() {
                for &j in &self.adj26[i] {
                    if cube[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        if fg_components != 1 {
            return false;
        }

        let mut seen = [false; 27];
        let mut bg_components = 0;
        for s in 0..27 {
            if !self.face[s] || cube[s] || seen[s] {
                continue;
            }
            bg_components += 1;
            if bg_components > 1 {
                return false;
            }
            seen[s] = true;
            stack.push(s);
            while let Some(i) = stack.pop() {
                for &j in &self.adj6[i] {
                    if self.in18[j] && !cube[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        bg_components == 1
    }
}

fn load_cube(mask: &Mask, p: [usize; 3]) -> [bool; 27] {
    let mut cube = [false; 27];
    for &d in &NEIGHBORS_26 {
        if let Some(q) = mask.dims().offset(p, d) {
            cube[cube_index(d)] = mask.get(q);
        }
    }
    cube[CENTER] = true;
    cube
}

/// Sweep order of the six border directions within one thinning pass.
const SWEEP_DIRECTIONS: [[i64; 3]; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

/// Thins `mask` to a one-voxel-wide centerline.
///
/// Each pass sweeps the six face directions; a sweep collects the voxels
/// whose neighbour in that direction is background, then deletes them one
/// at a time while they remain simple and are not curve ends (fewer than
/// two 26-neighbours). A two-neighbour voxel next to a deletion from the
/// same sweep waits for the next sweep, so a one-voxel staircase cannot
/// unravel from its tip. Passes repeat until nothing changes, then
/// single-voxel spurs hanging off division voxels are removed.
pub fn skeletonize(mask: &Mask) -> Result<Skeleton> {
    if mask.is_empty_mask() {
        return Err(Error::EmptyMask);
    }
    let topo = CubeTopology::new();
    let dims = mask.dims();
    let mut out = mask.clone();
    let mut alive: Vec<usize> = (0..dims.len()).filter(|&i| mask.data()[i]).collect();
    loop {
        let mut changed = false;
        for &dir in &SWEEP_DIRECTIONS {
            let border: Vec<usize> = alive
                .iter()
                .copied()
                .filter(|&i| dims.offset(dims.coords(i), dir).is_none_or(|q| !out.get(q)))
                .collect();
            let mut touched = Volume::filled(dims, false);
            for i in border {
                let p = dims.coords(i);
                let cube = load_cube(&out, p);
                let n = cube.iter().filter(|&&b| b).count() - 1;
                if n < 2 || (n == 2 && touched.data()[i]) || !topo.is_simple(&cube) {
                    continue;
                }
                out.data_mut()[i] = false;
                for &d in &NEIGHBORS_26 {
                    if let Some(q) = dims.offset(p, d) {
                        touched.set(q, true);
                    }
                }
                changed = true;
            }
            alive.retain(|&i| out.data()[i]);
        }
        if !changed {
            break;
        }
    }
    prune_corner_spurs(&mut out);
    Ok(Skeleton { mask: out })
}

fn neighbor_count(mask: &Mask, p: [usize; 3]) -> usize {
    NEIGHBORS_26
        .iter()
        .filter(|&&d| mask.dims().offset(p, d).is_some_and(|q| mask.get(q)))
        .count()
}

/// Drops single-voxel branches: end voxels whose only neighbour is a
/// division voxel.
fn prune_corner_spurs(skel: &mut Mask) {
    let dims = skel.dims();
    let spurs: Vec<[usize; 3]> = skel
        .foreground()
        .into_iter()
        .filter(|&p| {
            let mut nbrs = NEIGHBORS_26
                .iter()
                .filter_map(|&d| dims.offset(p, d))
                .filter(|&q| skel.get(q));
            match (nbrs.next(), nbrs.next()) {
                (Some(q), None) => neighbor_count(skel, q) >= 3,
                _ => false,
            }
        })
        .collect();
    for p in spurs {
        skel.set(p, false);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PointKind {
    End,
    Edge,
    Division,
}

impl PointKind {
    pub fn from_neighbor_count(n: usize) -> Self {
        match n {
            0 | 1 => PointKind::End,
            2 => PointKind::Edge,
            _ => PointKind::Division,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassifiedPoint {
    pub voxel: [usize; 3],
    pub kind: PointKind,
    /// Foreground skeleton voxels in the 26-neighbourhood.
    pub neighbors: usize,
}

#[derive(Debug, Clone)]
pub struct PointClasses {
    /// Skeleton voxels in storage order.
    pub points: Vec<ClassifiedPoint>,
    kinds: Volume<Option<PointKind>>,
}

impl PointClasses {
    pub fn kind_at(&self, p: [usize; 3]) -> Option<PointKind> {
        self.kinds.get(p)
    }

    /// Isolated voxels (no skeleton neighbours), classified `End`.
    pub fn degenerate(&self) -> Vec<[usize; 3]> {
        self.points
            .iter()
            .filter(|c| c.neighbors == 0)
            .map(|c| c.voxel)
            .collect()
    }

    pub fn count(&self, kind: PointKind) -> usize {
        self.points.iter().filter(|c| c.kind == kind).count()
    }
}

pub fn classify_points(skel: &Skeleton) -> PointClasses {
    let mask = skel.mask();
    let mut kinds = Volume::filled(mask.dims(), None);
    let points = mask
        .foreground()
        .into_iter()
        .map(|voxel| {
            let neighbors = mask.neighbor_count26(voxel);
            let kind = PointKind::from_neighbor_count(neighbors);
            kinds.set(voxel, Some(kind));
            ClassifiedPoint {
                voxel,
                kind,
                neighbors,
            }
        })
        .collect();
    PointClasses { points, kinds }
}

/// Centerline split at division points.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSet {
    /// Ordered chains of edge / end voxels.
    pub segments: Vec<Vec<[usize; 3]>>,
    /// 26-connected clusters of division voxels.
    pub junctions: Vec<Vec<[usize; 3]>>,
    /// Pairs `(i, j)`, `i < j`, of segments touching a common junction.
    pub adjacency: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SegmentOptions {
    /// Terminal segments (touching at most one junction) shorter than this
    /// are discarded. 0 keeps everything.
    pub min_segment_len: usize,
}

pub fn extract_segments(skel: &Skeleton, classes: &PointClasses) -> SegmentSet {
    extract_segments_with(skel, classes, SegmentOptions::default())
}

fn chebyshev_adjacent(a: [usize; 3], b: [usize; 3]) -> bool {
    (0..3).all(|k| a[k].abs_diff(b[k]) <= 1)
}

/// Orders one 26-connected component of edge/end voxels into a chain.
fn order_chain(voxels: &[usize], dims: Dims) -> Vec<[usize; 3]> {
    let coords: Vec<[usize; 3]> = voxels.iter().map(|&i| dims.coords(i)).collect();
    let n = coords.len();
    let nbrs: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i && chebyshev_adjacent(coords[i], coords[j]))
                .collect()
        })
        .collect();
    // `voxels` is sorted by storage index, i.e. lexicographic (z, y, x);
    // the first low-degree voxel is the smaller chain end.
    let start = (0..n).find(|&i| nbrs[i].len() <= 1).unwrap_or(0);
    let mut visited = vec![false; n];
    let mut chain = Vec::with_capacity(n);
    let mut cur = Some(start);
    while let Some(c) = cur {
        visited[c] = true;
        chain.push(coords[c]);
        cur = nbrs[c].iter().copied().filter(|&j| !visited[j]).min();
    }
    // a component that is not a simple path: append the remainder in storage order
    chain.extend((0..n).filter(|&i| !visited[i]).map(|i| coords[i]));
    chain
}

pub fn extract_segments_with(
    skel: &Skeleton,
    classes: &PointClasses,
    opts: SegmentOptions,
) -> SegmentSet {
    let mask = skel.mask();
    let dims = mask.dims();
    let split = |want_division: bool| {
        Volume::from_fn(dims, |p| {
            classes
                .kind_at(p)
                .is_some_and(|k| (k == PointKind::Division) == want_division)
        })
    };
    let group = |m: &Mask| {
        let comps = connected_components(m, Connectivity::TwentySix);
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); comps.count()];
        for (i, &l) in comps.labels.data().iter().enumerate() {
            if l != 0 {
                groups[l as usize - 1].push(i);
            }
        }
        groups
    };

    let junction_groups = group(&split(true));
    let junctions: Vec<Vec<[usize; 3]>> = junction_groups
        .iter()
        .map(|g| g.iter().map(|&i| dims.coords(i)).collect())
        .collect();

    let mut junction_of = Volume::filled(dims, u32::MAX);
    for (j, g) in junction_groups.iter().enumerate() {
        for &i in g {
            junction_of.data_mut()[i] = j as u32;
        }
    }
    let touching = |chain: &[[usize; 3]]| {
        let mut js: Vec<usize> = chain
            .iter()
            .flat_map(|&p| NEIGHBORS_26.iter().filter_map(move |&d| dims.offset(p, d)))
            .map(|q| junction_of.get(q))
            .filter(|&j| j != u32::MAX)
            .map(|j| j as usize)
            .collect();
        js.sort_unstable();
        js.dedup();
        js
    };

    let mut segments: Vec<(Vec<[usize; 3]>, Vec<usize>)> = group(&split(false))
        .iter()
        .map(|g| order_chain(g, dims))
        .map(|chain| {
            let js = touching(&chain);
            (chain, js)
        })
        .filter(|(chain, js)| js.len() > 1 || chain.len() >= opts.min_segment_len)
        .collect();
    segments.sort_by_key(|(chain, _)| dims.index_of(chain[0]));

    let mut adjacency = Vec::new();
    for i in 0..segments.len() {
        for j in (i + 1)..segments.len() {
            if segments[i].1.iter().any(|a| segments[j].1.contains(a)) {
                adjacency.push((i, j));
            }
        }
    }
    SegmentSet {
        segments: segments.into_iter().map(|(c, _)| c).collect(),
        junctions,
        adjacency,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(dims: Dims, voxels: &[[usize; 3]]) -> Mask {
        let mut m = Mask::empty(dims);
        for &v in voxels {
            m.set(v, true);
        }
        m
    }

    /// Three 4-voxel arms meeting at (5, 5, 5): one straight down, two
    /// diagonals upward in the xz-plane.
    fn y_shape_arms(len: [usize; 3]) -> Mask {
        let mut v = vec![[5, 5, 5]];
        for k in 1..=len[0] {
            v.push([5, 5, 5 - k]);
        }
        for k in 1..=len[1] {
            v.push([5 + k, 5, 5 + k]);
        }
        for k in 1..=len[2] {
            v.push([5 - k, 5, 5 + k]);
        }
        mask_from(Dims::cube(11), &v)
    }

    fn y_shape() -> Mask {
        y_shape_arms([4, 4, 4])
    }

    #[test]
    fn solid_tube_thins_to_axis() {
        let mask = Volume::from_fn(Dims::new(3, 3, 9), |_| true);
        let skel = skeletonize(&mask).unwrap();
        let expect: Vec<[usize; 3]> = (0..9).map(|z| [1, 1, z]).collect();
        assert_eq!(skel.mask().foreground(), expect);
    }

    #[test]
    fn padded_tube_thins_to_axis() {
        let mask = Volume::from_fn(Dims::new(9, 9, 15), |[x, y, z]| {
            (2..7).contains(&x) && (2..7).contains(&y) && (2..13).contains(&z)
        });
        let skel = skeletonize(&mask).unwrap();
        let fg = skel.mask().foreground();
        assert!(fg.iter().all(|p| p[0] == 4 && p[1] == 4), "{fg:?}");
        assert_eq!(classify_points(&skel).count(PointKind::Division), 0);
    }

    #[test]
    fn single_voxel_and_empty() {
        let m = mask_from(Dims::cube(3), &[[1, 1, 1]]);
        assert_eq!(skeletonize(&m).unwrap().mask(), &m);
        assert!(matches!(
            skeletonize(&Mask::empty(Dims::cube(3))),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn simple_point_basics() {
        let topo = CubeTopology::new();
        let mut cube = [false; 27];
        cube[CENTER] = true;
        // isolated: deleting removes a component
        assert!(!topo.is_simple(&cube));
        cube[cube_index([0, 0, -1])] = true;
        assert!(topo.is_simple(&cube));
        cube[cube_index([0, 0, 1])] = true;
        // middle of a line: two foreground components
        assert!(!topo.is_simple(&cube));
        // full cube: interior voxel, deleting creates a cavity
        assert!(!topo.is_simple(&[true; 27]));
    }

    #[test]
    fn chain_classification() {
        let v: Vec<[usize; 3]> = (0..5).map(|i| [i + 1, 2, 2]).collect();
        let skel = Skeleton::from_mask(mask_from(Dims::cube(8), &v)).unwrap();
        let c = classify_points(&skel);
        assert_eq!(
            (
                c.count(PointKind::End),
                c.count(PointKind::Edge),
                c.count(PointKind::Division)
            ),
            (2, 3, 0)
        );
    }

    #[test]
    fn y_shape_classification_matches_neighbor_count() {
        let skel = Skeleton::from_mask(y_shape()).unwrap();
        let c = classify_points(&skel);
        for p in &c.points {
            let brute = skel
                .mask()
                .foreground()
                .iter()
                .filter(|&&q| q != p.voxel && (0..3).all(|a| q[a].abs_diff(p.voxel[a]) <= 1))
                .count();
            assert_eq!(p.neighbors, brute);
        }
        assert_eq!(c.kind_at([5, 5, 5]), Some(PointKind::Division));
        assert_eq!(c.count(PointKind::Division), 1);
        for tip in [[5, 5, 1], [9, 5, 9], [1, 5, 9]] {
            assert_eq!(c.kind_at(tip), Some(PointKind::End));
        }
    }

    #[test]
    fn isolated_voxel_is_degenerate_end() {
        let skel = Skeleton::from_mask(mask_from(Dims::cube(3), &[[1, 1, 1]])).unwrap();
        let c = classify_points(&skel);
        assert_eq!(c.points[0].kind, PointKind::End);
        assert_eq!(c.degenerate(), vec![[1, 1, 1]]);
    }

    #[test]
    fn y_shape_segments() {
        let skel = Skeleton::from_mask(y_shape()).unwrap();
        let s = extract_segments(&skel, &classify_points(&skel));
        assert_eq!(s.segments.len(), 3);
        assert_eq!(s.junctions, vec![vec![[5, 5, 5]]]);
        assert_eq!(s.adjacency, vec![(0, 1), (0, 2), (1, 2)]);
        for chain in &s.segments {
            assert_eq!(chain.len(), 4);
            for w in chain.windows(2) {
                assert!(chebyshev_adjacent(w[0], w[1]));
            }
        }
        // each chain starts at its lexicographically smaller (z, y, x) end
        assert_eq!(s.segments[0][0], [5, 5, 1]);
        assert_eq!(s.segments[1][0], [4, 5, 6]);
        assert_eq!(s.segments[2][0], [6, 5, 6]);
    }

    #[test]
    fn chains_without_junctions() {
        let v: Vec<[usize; 3]> = (0..5).map(|i| [5 - i, 1, 1 + i]).collect();
        let skel = Skeleton::from_mask(mask_from(Dims::cube(8), &v)).unwrap();
        let s = extract_segments(&skel, &classify_points(&skel));
        assert_eq!(s.segments.len(), 1);
        assert!(s.junctions.is_empty() && s.adjacency.is_empty());
        assert_eq!(s.segments[0][0], [5, 1, 1]);
        assert_eq!(s.segments[0].len(), 5);

        let mut v2: Vec<[usize; 3]> = (0..4).map(|i| [1, 1, i]).collect();
        v2.extend((0..4).map(|i| [5, 5, i]));
        let skel = Skeleton::from_mask(mask_from(Dims::cube(8), &v2)).unwrap();
        let s = extract_segments(&skel, &classify_points(&skel));
        assert_eq!(s.segments.len(), 2);
        assert!(s.adjacency.is_empty());
    }

    #[test]
    fn spur_filter_drops_short_terminal_segments() {
        let m = y_shape_arms([4, 5, 5]);
        let skel = Skeleton::from_mask(m).unwrap();
        let c = classify_points(&skel);
        assert_eq!(extract_segments(&skel, &c).segments.len(), 3);
        let s = extract_segments_with(&skel, &c, SegmentOptions { min_segment_len: 5 });
        assert_eq!(s.segments.len(), 2);
    }

    #[test]
    fn rejects_thick_mask() {
        assert!(Skeleton::from_mask(Mask::filled(Dims::cube(2), true)).is_err());
    }
}
