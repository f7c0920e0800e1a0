//! Glue from a synthetic case to a labelled bronchial graph.

use std::collections::BTreeMap;

use crate::brongraph::{build_graph, BronchialGraph};
use crate::error::{Error, Result};
use crate::skeleton::{
    classify_points, extract_segments_with, skeletonize, SegmentOptions, SegmentSet, Skeleton,
};
use crate::synthgen::{nearest_branch, BranchRecord, SyntheticCase};
use crate::volgrid::Mask;

#[derive(Debug, Clone)]
pub struct CaseCenterline {
    pub skeleton: Skeleton,
    pub segments: SegmentSet,
}

pub fn case_centerline(case: &SyntheticCase, opts: SegmentOptions) -> Result<CaseCenterline> {
    let skeleton = skeletonize(&case.gt_mask)?;
    let classes = classify_points(&skeleton);
    let segments = extract_segments_with(&skeleton, &classes, opts);
    Ok(CaseCenterline { skeleton, segments })
}

/// Majority class of the nearest branch over a segment's voxels; ties go to
/// the lower class id.
pub fn segment_labels(segments: &SegmentSet, branches: &[BranchRecord]) -> Result<Vec<usize>> {
    if branches.is_empty() {
        return Err(Error::InvalidInput("no branches to label against".into()));
    }
    Ok(segments
        .segments
        .iter()
        .map(|chain| {
            let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
            for &p in chain {
                if let Some(b) = nearest_branch(branches, p) {
                    *votes.entry(branches[b].class_id).or_default() += 1;
                }
            }
            votes
                .into_iter()
                .fold(
                    (0, 0),
                    |best, (c, n)| if n > best.1 { (c, n) } else { best },
                )
                .0
        })
        .collect())
}

pub fn case_graph(case: &SyntheticCase, k: usize, opts: SegmentOptions) -> Result<BronchialGraph> {
    let cl = case_centerline(case, opts)?;
    let labels = segment_labels(&cl.segments, &case.branches)?;
    build_graph(&cl.segments, &case.descriptor_feats, Some(&labels), k)
}

/// Fraction of `from` voxels with a `to` voxel within Chebyshev distance 1.
pub fn chebyshev_coverage(from: &Mask, to: &Mask) -> Result<f64> {
    if from.dims() != to.dims() {
        return Err(Error::DimMismatch("coverage masks differ in dims".into()));
    }
    let pts = from.foreground();
    if pts.is_empty() {
        return Ok(1.0);
    }
    let dims = from.dims();
    let hit = pts
        .iter()
        .filter(|&&p| {
            to.get(p)
                || crate::volgrid::NEIGHBORS_26
                    .iter()
                    .any(|&d| dims.offset(p, d).is_some_and(|q| to.get(q)))
        })
        .count();
    Ok(hit as f64 / pts.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::PointKind;
    use crate::synthgen::{generate_case, SynthParams};
    use crate::volgrid::{Dims, Volume};

    #[test]
    fn coverage_examples() {
        let dims = Dims::cube(6);
        let a = Volume::from_fn(dims, |[x, y, z]| y == 2 && z == 2 && x < 5);
        let b = Volume::from_fn(dims, |[x, y, z]| y == 3 && z == 3 && x < 3);
        // b covers x in 0..=3 of a
        assert_eq!(chebyshev_coverage(&a, &b).unwrap(), 4.0 / 5.0);
        assert_eq!(chebyshev_coverage(&b, &a).unwrap(), 1.0);
    }

    #[test]
    fn single_tube_is_one_segment() {
        let p = SynthParams {
            depth: 1,
            ..Default::default()
        };
        let case = generate_case(0, &p).unwrap();
        let cl = case_centerline(&case, SegmentOptions::default()).unwrap();
        let classes = classify_points(&cl.skeleton);
        assert_eq!(classes.count(PointKind::End), 2);
        assert_eq!(classes.count(PointKind::Division), 0);
        assert_eq!(cl.segments.segments.len(), 1);
    }

    #[test]
    fn depth3_graph_matches_truth() {
        for seed in 0..3 {
            let p = SynthParams {
                depth: 3,
                ..Default::default()
            };
            let case = generate_case(seed, &p).unwrap();
            let g = case_graph(&case, 10, SegmentOptions::default()).unwrap();
            assert_eq!(g.n_nodes(), 7, "seed {seed}");
            let mut labels = g.labels().unwrap();
            labels.sort();
            assert_eq!(labels, vec![0, 1, 2, 3, 4, 5, 6], "seed {seed}");
        }
    }
}
