//! Hard-region discovery and the multi-scale hard-region-aware dice loss.
//!
//! The hard region is the ground-truth airway minus the main trachea,
//! grown by one 26-dilation. Level `h` of the supervision pyramid is that
//! mask max-pooled with stride 2, `h` times.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::dice_score;
use crate::volgrid::{dilate26, maxpool_stride2, Dims, Mask, Volume};

/// Dice smoothing constant.
pub const DICE_EPS: f64 = 1.0;

pub fn hard_region(gt_mask: &Mask, trachea_mask: &Mask) -> Result<Mask> {
    Ok(dilate26(&gt_mask.and_not(trachea_mask)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionPyramid {
    /// `levels[h - 1]` is the target for decoder level `h`.
    pub levels: Vec<Mask>,
}

impl SupervisionPyramid {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }
}

pub fn build_pyramid(y_hr: &Mask, depth: usize) -> Result<SupervisionPyramid> {
    if depth == 0 {
        return Err(Error::InvalidInput(
            "pyramid needs at least one level".into(),
        ));
    }
    let mut levels: Vec<Mask> = Vec::with_capacity(depth);
    let mut cur = maxpool_stride2(y_hr);
    for _ in 1..depth {
        let next = maxpool_stride2(&cur);
        levels.push(cur);
        cur = next;
    }
    levels.push(cur);
    Ok(SupervisionPyramid { levels })
}

/// Smoothed soft dice loss `1 - (2 sum(p t) + eps) / (sum p + sum t + eps)`
/// and its analytic gradient with respect to `pred`.
pub fn dice_loss(pred: &Volume<f64>, target: &Mask) -> Result<(f64, Volume<f64>)> {
    pred.ensure_same_dims(target, "dice loss")?;
    if let Some(bad) = pred.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidInput(format!(
            "prediction {bad} outside [0, 1]"
        )));
    }
    let mut inter = 0.0;
    let mut sum = 0.0;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let t = t as u8 as f64;
        inter += p * t;
        sum += p + t;
    }
    let num = 2.0 * inter + DICE_EPS;
    let den = sum + DICE_EPS;
    let loss = 1.0 - num / den;
    let den2 = den * den;
    let grad = Volume::from_vec(
        pred.dims(),
        target
            .data()
            .iter()
            .map(|&t| -(2.0 * (t as u8 as f64) * den - num) / den2)
            .collect(),
    )?;
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub dice_full: f64,
    pub hr_terms: Vec<f64>,
}

/// Loss values plus per-input gradients of the total.
#[derive(Debug, Clone)]
pub struct SegLossGrad {
    pub report: LossReport,
    pub grad_full: Volume<f64>,
    pub grad_hr: Vec<Volume<f64>>,
}

pub fn seg_loss(
    pred_full: &Volume<f64>,
    pred_hr: &[Volume<f64>],
    gt: &Mask,
    pyramid: &SupervisionPyramid,
) -> Result<LossReport> {
    seg_loss_with_grad(pred_full, pred_hr, gt, pyramid).map(|g| g.report)
}

pub fn seg_loss_with_grad(
    pred_full: &Volume<f64>,
    pred_hr: &[Volume<f64>],
    gt: &Mask,
    pyramid: &SupervisionPyramid,
) -> Result<SegLossGrad> {
    if pred_hr.len() != pyramid.depth() {
        return Err(Error::DimMismatch(format!(
            "{} hard-region predictions for a {}-level pyramid",
            pred_hr.len(),
            pyramid.depth()
        )));
    }
    let (dice_full, grad_full) = dice_loss(pred_full, gt)?;
    let mut hr_terms = Vec::with_capacity(pred_hr.len());
    let mut grad_hr = Vec::with_capacity(pred_hr.len());
    for (p, target) in pred_hr.iter().zip(&pyramid.levels) {
        let (l, g) = dice_loss(p, target)?;
        hr_terms.push(l);
        grad_hr.push(g);
    }
    let total = dice_full + hr_terms.iter().sum::<f64>();
    Ok(SegLossGrad {
        report: LossReport {
            total,
            dice_full,
            hr_terms,
        },
        grad_full,
        grad_hr,
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-pools `src` with a `factor`-sized window and records, per output
/// voxel, the storage index of the first maximal source voxel.
pub(crate) fn pool_with_argmax(src: &Volume<f64>, factor: usize) -> (Volume<f64>, Vec<usize>) {
    let sd = src.dims();
    let od = Dims::new(
        sd.nx.div_ceil(factor).max(1),
        sd.ny.div_ceil(factor).max(1),
        sd.nz.div_ceil(factor).max(1),
    );
    let mut vals = vec![f64::NEG_INFINITY; od.len()];
    let mut arg = vec![0usize; od.len()];
    for (i, &v) in src.data().iter().enumerate() {
        let [x, y, z] = sd.coords(i);
        let o = od.index(x / factor, y / factor, z / factor);
        if v > vals[o] {
            vals[o] = v;
            arg[o] = i;
        }
    }
    (Volume::from_vec(od, vals).expect("pooled dims"), arg)
}

#[derive(Debug, Clone)]
pub struct DemoOutcome {
    /// Hard dice score of `sigmoid(logits) > 0.5` against `gt`, one entry
    /// per step, recorded after the update.
    pub dice_trajectory: Vec<f64>,
    pub final_pred: Volume<f64>,
    pub final_report: LossReport,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Free parameters with Adam moments.
struct AdamVec {
    x: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamVec {
    fn zeros(n: usize) -> Self {
        Self {
            x: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, grad: &[f64], lr: f64, t: usize) {
        let (c1, c2) = (1.0 - ADAM_B1.powi(t as i32), 1.0 - ADAM_B2.powi(t as i32));
        for i in 0..self.x.len() {
            self.m[i] = ADAM_B1 * self.m[i] + (1.0 - ADAM_B1) * grad[i];
            self.v[i] = ADAM_B2 * self.v[i] + (1.0 - ADAM_B2) * grad[i] * grad[i];
            self.x[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + ADAM_EPS);
        }
    }

    fn probs(&self, dims: Dims) -> Volume<f64> {
        Volume::from_vec(dims, self.x.iter().map(|&l| sigmoid(l)).collect())
            .expect("matching length")
    }
}

/// How decoder-level predictions relate to the full-resolution map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelCoupling {
    /// Each level has its own logit volume at its resolution.
    #[default]
    Independent,
    /// Level `h` is the stride-2^h max-pool of the full-resolution sigmoid
    /// map; its gradient routes to each block's argmax voxel.
    SharedPool,
}

/// Fits free logits to `gt` under the full hard-region-aware loss with
/// independent level heads. See [`optimize_logits_demo_with`].
pub fn optimize_logits_demo(
    gt: &Mask,
    trachea: &Mask,
    levels: usize,
    steps: usize,
    lr: f64,
) -> Result<DemoOutcome> {
    optimize_logits_demo_with(gt, trachea, levels, steps, lr, LevelCoupling::Independent)
}

/// Gradient descent (Adam, learning rate `lr`) on free per-voxel logits
/// under `seg_loss`. The dice trajectory scores `logit > 0` of the
/// full-resolution map after every step.
///
/// With [`LevelCoupling::SharedPool`] the loss has a positive floor
/// whenever the hard-region pyramid disagrees with the pooled ground truth
/// (dilation halo blocks holding no airway voxel, trachea blocks outside
/// the hard region), so the full map cannot fit `gt` and every level at
/// once.
pub fn optimize_logits_demo_with(
    gt: &Mask,
    trachea: &Mask,
    levels: usize,
    steps: usize,
    lr: f64,
    coupling: LevelCoupling,
) -> Result<DemoOutcome> {
    if steps == 0 {
        return Err(Error::InvalidInput("steps must be >= 1".into()));
    }
    let pyramid = build_pyramid(&hard_region(gt, trachea)?, levels)?;
    let dims = gt.dims();
    let mut shared = AdamVec::zeros(dims.len());
    let mut heads: Vec<AdamVec> = match coupling {
        LevelCoupling::Independent => pyramid
            .levels
            .iter()
            .map(|l| AdamVec::zeros(l.dims().len()))
            .collect(),
        LevelCoupling::SharedPool => Vec::new(),
    };
    let mut dice_trajectory = Vec::with_capacity(steps);

    // level predictions plus, for shared pooling, the argmax routes
    let predictions = |shared: &AdamVec, heads: &[AdamVec]| {
        let prob = shared.probs(dims);
        let hr: Vec<(Volume<f64>, Vec<usize>)> = match coupling {
            LevelCoupling::Independent => heads
                .iter()
                .zip(&pyramid.levels)
                .map(|(head, target)| (head.probs(target.dims()), Vec::new()))
                .collect(),
            LevelCoupling::SharedPool => (1..=levels)
                .map(|h| pool_with_argmax(&prob, 1 << h))
                .collect(),
        };
        (prob, hr)
    };

    for t in 1..=steps {
        let (prob, hr) = predictions(&shared, &heads);
        let pred_hr: Vec<Volume<f64>> = hr.iter().map(|(p, _)| p.clone()).collect();
        let g = seg_loss_with_grad(&prob, &pred_hr, gt, &pyramid)?;

        let mut dprob = g.grad_full.into_data();
        match coupling {
            LevelCoupling::Independent => {
                for ((head, (q, _)), gh) in heads.iter_mut().zip(&hr).zip(&g.grad_hr) {
                    let dlogit: Vec<f64> = gh
                        .data()
                        .iter()
                        .zip(q.data())
                        .map(|(&d, &q)| d * q * (1.0 - q))
                        .collect();
                    head.step(&dlogit, lr, t);
                }
            }
            LevelCoupling::SharedPool => {
                for ((_, arg), gh) in hr.iter().zip(&g.grad_hr) {
                    for (o, &src) in arg.iter().enumerate() {
                        dprob[src] += gh.data()[o];
                    }
                }
            }
        }
        let dlogit: Vec<f64> = dprob
            .iter()
            .zip(prob.data())
            .map(|(&d, &p)| d * p * (1.0 - p))
            .collect();
        shared.step(&dlogit, lr, t);
        let hard = Volume::from_vec(dims, shared.x.iter().map(|&x| x > 0.0).collect())?;
        dice_trajectory.push(dice_score(&hard, gt)?);
    }

    let (final_pred, hr) = predictions(&shared, &heads);
    let pred_hr: Vec<Volume<f64>> = hr.into_iter().map(|(p, _)| p).collect();
    let final_report = seg_loss(&final_pred, &pred_hr, gt, &pyramid)?;
    Ok(DemoOutcome {
        dice_trajectory,
        final_pred,
        final_report,
    })
}
