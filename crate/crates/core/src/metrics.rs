//! Segmentation and classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::Mask;

/// `2|P ∩ G| / (|P| + |G|)`, with empty-vs-empty scoring 1.
pub fn dice_score(pred: &Mask, gt: &Mask) -> Result<f64> {
    pred.ensure_same_dims(gt, "dice score")?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Node classification scores, macro-averaged over the classes that occur
/// in the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn classification_metrics(
    pred: &[usize],
    gt: &[usize],
    num_classes: usize,
) -> Result<ClassificationScores> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::InvalidInput(format!(
            "need equal, nonempty label lists (got {} predictions, {} ground truth)",
            pred.len(),
            gt.len()
        )));
    }
    if let Some(&bad) = pred.iter().chain(gt).find(|&&c| c >= num_classes) {
        return Err(Error::InvalidInput(format!(
            "class {bad} outside 0..{num_classes}"
        )));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fneg = vec![0usize; num_classes];
    let mut support = vec![0usize; num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        support[g] += 1;
        if p == g {
            tp[g] += 1;
        } else {
            fp[p] += 1;
            fneg[g] += 1;
        }
    }
    let present: Vec<usize> = (0..num_classes).filter(|&c| support[c] > 0).collect();
    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    for &c in &present {
        let p = ratio(tp[c], tp[c] + fp[c]);
        let r = ratio(tp[c], tp[c] + fneg[c]);
        let f = if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        };
        sp += p;
        sr += r;
        sf += f;
    }
    let k = present.len() as f64;
    Ok(ClassificationScores {
        accuracy: ratio(tp.iter().sum(), pred.len()),
        precision: sp / k,
        recall: sr / k,
        f1: sf / k,
    })
}

/// Fraction of same-label edges whose endpoints receive different
/// predictions; 0 when no edge joins two nodes of equal label.
pub fn neighbor_disagreement(
    pred: &[usize],
    gt: &[usize],
    edges: &[(usize, usize)],
) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} labels",
            pred.len(),
            gt.len()
        )));
    }
    let (mut same, mut split) = (0usize, 0usize);
    for &(a, b) in edges {
        if a >= gt.len() || b >= gt.len() {
            return Err(Error::InvalidInput(format!("edge ({a}, {b}) out of range")));
        }
        if gt[a] == gt[b] {
            same += 1;
            split += (pred[a] != pred[b]) as usize;
        }
    }
    Ok(ratio(split, same))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::{Dims, Volume};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dice_score_examples() {
        let dims = Dims::new(10, 10, 1);
        let a = Volume::from_fn(dims, |[x, y, _]| x < 4 && y < 10);
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        let b = Volume::from_fn(dims, |[x, _, _]| x >= 5);
        assert_eq!(dice_score(&a, &b).unwrap(), 0.0);
        // |P| = 40, |G| = 60, overlap 30
        let g = Volume::from_fn(dims, |[x, _, _]| (1..7).contains(&x));
        assert_eq!(dice_score(&a, &g).unwrap(), 0.6);
        let e = Mask::empty(dims);
        assert_eq!(dice_score(&e, &e).unwrap(), 1.0);
        assert!(dice_score(&e, &Mask::empty(Dims::cube(2))).is_err());
    }

    #[test]
    fn classification_examples() {
        let perfect = classification_metrics(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap();
        assert_eq!(
            perfect,
            ClassificationScores {
                accuracy: 1.0,
                precision: 1.0,
                recall: 1.0,
                f1: 1.0
            }
        );

        let m = classification_metrics(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.recall, 0.5);
        assert_eq!(m.precision, 0.25);
        assert!(classification_metrics(&[], &[], 2).is_err());
        assert!(classification_metrics(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn neighbor_disagreement_examples() {
        let edges = [(0, 1), (1, 2), (2, 3)];
        // same-label edges: (0,1) and (2,3); only (2,3) is split
        assert_eq!(
            neighbor_disagreement(&[4, 4, 0, 1], &[0, 0, 1, 1], &edges).unwrap(),
            0.5
        );
        assert_eq!(
            neighbor_disagreement(&[0, 1, 0, 1], &[0, 1, 0, 1], &edges).unwrap(),
            0.0
        );
        assert!(neighbor_disagreement(&[0], &[0, 1], &edges).is_err());
        assert!(neighbor_disagreement(&[0, 0], &[0, 0], &edges).is_err());
    }

    #[test]
    fn classification_matches_confusion_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = 6;
        let gt: Vec<usize> = (0..100).map(|_| rng.random_range(0..l - 1)).collect();
        let pred: Vec<usize> = gt
            .iter()
            .map(|&g| {
                if rng.random_bool(0.7) {
                    g
                } else {
                    rng.random_range(0..l)
                }
            })
            .collect();
        let mut cm = vec![vec![0usize; l]; l];
        for (&g, &p) in gt.iter().zip(&pred) {
            cm[g][p] += 1;
        }
        let present: Vec<usize> = (0..l)
            .filter(|&c| cm[c].iter().sum::<usize>() > 0)
            .collect();
        let mut precision = 0.0;
        let mut recall = 0.0;
        let mut f1 = 0.0;
        for &c in &present {
            let col: usize = (0..l).map(|r| cm[r][c]).sum();
            let row: usize = cm[c].iter().sum();
            let p = if col == 0 {
                0.0
            } else {
                cm[c][c] as f64 / col as f64
            };
            let r = cm[c][c] as f64 / row as f64;
            precision += p;
            recall += r;
            f1 += if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            };
        }
        let n = present.len() as f64;
        let acc = (0..l).map(|c| cm[c][c]).sum::<usize>() as f64 / 100.0;
        let m = classification_metrics(&pred, &gt, l).unwrap();
        assert!((m.accuracy - acc).abs() < 1e-12);
        assert!((m.precision - precision / n).abs() < 1e-12);
        assert!((m.recall - recall / n).abs() < 1e-12);
        assert!((m.f1 - f1 / n).abs() < 1e-12);
    }
}
