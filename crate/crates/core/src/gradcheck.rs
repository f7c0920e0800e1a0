//! Finite-difference gradient checking, plus a seeded suite that checks
//! every hand-written backward pass in the crate.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::ahr::dice_loss;
use crate::error::Result;
use crate::pvgnn::{
    backward, forward, graph_norm, graph_norm_backward, mean_sage, mean_sage_backward, ncr_loss,
    softmax_ce, total_loss, Adjacency, FeatureMode, GraphInput, ModelShape, PvgnnParams,
};
use crate::synthgen::derive_seed;
use crate::volgrid::{Dims, Volume};

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`, 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Tolerance for scalar losses.
pub const LOSS_TOLERANCE: f64 = 1e-5;
/// Tolerance for layers and the full network.
pub const LAYER_TOLERANCE: f64 = 1e-4;

const H: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.random_range(lo..hi))
}

fn rand_edges(rng: &mut ChaCha8Rng, n: usize) -> Vec<(usize, usize)> {
    // a random tree plus a few chords
    let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (rng.random_range(0..i), i)).collect();
    for _ in 0..n / 3 {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b && !edges.contains(&(a, b)) && !edges.contains(&(b, a)) {
            edges.push((a, b));
        }
    }
    edges
}

fn flat<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn mat(shape: (usize, usize), v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec(shape, v.to_vec()).expect("shape matches")
}

fn run(
    op: &'static str,
    instances: usize,
    tolerance: f64,
    mut one: impl FnMut(usize) -> Result<f64>,
) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        worst = worst.max(one(i)?);
    }
    Ok(CheckResult {
        op,
        instances,
        max_rel_error: worst,
        tolerance,
    })
}

pub fn check_dice_loss(instances: usize, seed: u64) -> Result<CheckResult> {
    run("dice_loss", instances, LOSS_TOLERANCE, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let dims = Dims::new(
            rng.random_range(2..6),
            rng.random_range(2..6),
            rng.random_range(1..5),
        );
        let target = Volume::from_fn(dims, |_| rng.random_bool(0.4));
        let pred = Volume::from_fn(dims, |_| rng.random_range(0.05..0.95));
        let (_, grad) = dice_loss(&pred, &target)?;
        let num = numeric_gradient(
            |v| {
                dice_loss(&Volume::from_vec(dims, v.to_vec()).expect("dims"), &target)
                    .expect("valid")
                    .0
            },
            pred.data(),
            H,
        );
        Ok(relative_error(grad.data(), &num))
    })
}

fn logits_instance(rng: &mut ChaCha8Rng) -> (Array2<f64>, Vec<usize>, Vec<(usize, usize)>) {
    let n = rng.random_range(3..10);
    let c = rng.random_range(2..7);
    let z = rand_mat(rng, n, c).mapv(|v| 3.0 * v);
    // few classes so that same-label edges occur
    let labels = (0..n).map(|_| rng.random_range(0..c.min(3))).collect();
    (z, labels, rand_edges(rng, n))
}

pub fn check_softmax_ce(instances: usize, seed: u64) -> Result<CheckResult> {
    run("softmax_ce", instances, LOSS_TOLERANCE, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let (z, labels, _) = logits_instance(&mut rng);
        let (_, grad) = softmax_ce(&z, &labels)?;
        let num = numeric_gradient(
            |v| softmax_ce(&mat(z.dim(), v), &labels).expect("valid").0,
            &flat(&z),
            H,
        );
        Ok(relative_error(&flat(&grad), &num))
    })
}

pub fn check_ncr_loss(instances: usize, seed: u64) -> Result<CheckResult> {
    run("ncr_loss", instances, LOSS_TOLERANCE, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let (z, labels, edges) = logits_instance(&mut rng);
        let (_, grad) = ncr_loss(&z, &labels, &edges)?;
        let num = numeric_gradient(
            |v| {
                ncr_loss(&mat(z.dim(), v), &labels, &edges)
                    .expect("valid")
                    .0
            },
            &flat(&z),
            H,
        );
        Ok(relative_error(&flat(&grad), &num))
    })
}

pub fn check_total_loss(instances: usize, seed: u64) -> Result<CheckResult> {
    run("total_loss", instances, LOSS_TOLERANCE, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let (z, labels, edges) = logits_instance(&mut rng);
        let alpha = rng.random_range(0.1..2.0);
        let (_, grad) = total_loss(&z, &labels, &edges, alpha)?;
        let num = numeric_gradient(
            |v| {
                total_loss(&mat(z.dim(), v), &labels, &edges, alpha)
                    .expect("valid")
                    .0
            },
            &flat(&z),
            H,
        );
        Ok(relative_error(&flat(&grad), &num))
    })
}

/// Checks the input and all three parameter gradients of `mean_sage`
/// under the scalar functional `sum(out * r)`.
pub fn check_mean_sage(instances: usize, seed: u64) -> Result<CheckResult> {
    run("mean_sage", instances, LAYER_TOLERANCE, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let (n, fi, fo) = (
            rng.random_range(2..9),
            rng.random_range(1..6),
            rng.random_range(1..6),
        );
        let x = rand_mat(&mut rng, n, fi);
        let adj = Adjacency::new(n, &rand_edges(&mut rng, n))?;
        let ws = rand_mat(&mut rng, fi, fo);
        let wn = rand_mat(&mut rng, fi, fo);
        let b = rand_vec(&mut rng, fo, -1.0, 1.0);
        let r = rand_mat(&mut rng, n, fo);
        let (_, agg) = mean_sage(&x, &adj, &ws, &wn, &b)?;
        let g = mean_sage_backward(&x, &agg, &adj, &ws, &wn, &r);
        let f = |x: &Array2<f64>, ws: &Array2<f64>, wn: &Array2<f64>, b: &Array1<f64>| {
            (mean_sage(x, &adj, ws, wn, b).expect("valid").0 * &r).sum()
        };
        let errs = [
            relative_error(
                &flat(&g.dx),
                &numeric_gradient(|v| f(&mat(x.dim(), v), &ws, &wn, &b), &flat(&x), H),
            ),
            relative_error(
                &flat(&g.dw_self),
                &numeric_gradient(|v| f(&x, &mat(ws.dim(), v), &wn, &b), &flat(&ws), H),
            ),
            relative_error(
                &flat(&g.dw_neigh),
                &numeric_gradient(|v| f(&x, &ws, &mat(wn.dim(), v), &b), &flat(&wn), H),
            ),
            relative_error(
                &flat(&g.dbias),
                &numeric_gradient(|v| f(&x, &ws, &wn, &Array1::from(v.to_vec())), &flat(&b), H),
            ),
        ];
        Ok(errs.into_iter().fold(0.0, f64::max))
    })
}

/// Checks input, scale, shift and mean-gate gradients of `graph_norm`.
pub fn check_graph_norm(instances: usize, seed: u64) -> Result<CheckResult> {
    run("graph_norm", instances, LAYER_TOLERANCE, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let (n, f) = (rng.random_range(2..9), rng.random_range(1..6));
        let x = rand_mat(&mut rng, n, f);
        let gamma = rand_vec(&mut rng, f, 0.5, 1.5);
        let beta = rand_vec(&mut rng, f, -1.0, 1.0);
        let alpha = rand_vec(&mut rng, f, 0.0, 1.5);
        let r = rand_mat(&mut rng, n, f);
        let (_, cache) = graph_norm(&x, &gamma, &beta, &alpha)?;
        let g = graph_norm_backward(&cache, &gamma, &alpha, &r);
        let f = |x: &Array2<f64>, gm: &Array1<f64>, bt: &Array1<f64>, al: &Array1<f64>| {
            (graph_norm(x, gm, bt, al).expect("valid").0 * &r).sum()
        };
        let v1 = |v: &[f64]| Array1::from(v.to_vec());
        let errs = [
            relative_error(
                &flat(&g.dx),
                &numeric_gradient(|v| f(&mat(x.dim(), v), &gamma, &beta, &alpha), &flat(&x), H),
            ),
            relative_error(
                &flat(&g.dgamma),
                &numeric_gradient(|v| f(&x, &v1(v), &beta, &alpha), &flat(&gamma), H),
            ),
            relative_error(
                &flat(&g.dbeta),
                &numeric_gradient(|v| f(&x, &gamma, &v1(v), &alpha), &flat(&beta), H),
            ),
            relative_error(
                &flat(&g.dalpha),
                &numeric_gradient(|v| f(&x, &gamma, &beta, &v1(v)), &flat(&alpha), H),
            ),
        ];
        Ok(errs.into_iter().fold(0.0, f64::max))
    })
}

/// End-to-end: every parameter of a small randomly perturbed network,
/// on a two-graph stacked batch, under CE plus NCR.
pub fn check_full_backward(instances: usize, seed: u64) -> Result<CheckResult> {
    run("full_backward", instances, LAYER_TOLERANCE, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let shape = ModelShape {
            feature_mode: FeatureMode::PointOnly,
            hidden: 6,
            blocks: 3,
            classes: 4,
        };
        let mut params = PvgnnParams::init(shape, rng.random())?;
        for t in params.tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
        let parts: Vec<GraphInput> = (0..2)
            .map(|_| {
                let n = rng.random_range(3..8);
                let x =
                    Array2::from_shape_fn((n, shape.input_dim()), |_| rng.random_range(0.0..1.0));
                let labels = (0..n).map(|_| rng.random_range(0..2)).collect();
                let edges = rand_edges(&mut rng, n);
                GraphInput::new(x, edges, Some(labels))
            })
            .collect::<Result<_>>()?;
        let graph = GraphInput::stack(&parts.iter().collect::<Vec<_>>())?;
        let alpha = rng.random_range(0.1..1.0);
        let (_, grads) = backward(&graph, &params, alpha, None)?;
        let labels = graph.labels.clone().expect("labelled");
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        let n_tensors = params.tensors().len();
        for k in 0..n_tensors {
            let x0 = params.tensors()[k].to_vec();
            let mut probe = params.clone();
            numeric.extend(numeric_gradient(
                |v| {
                    probe.tensors_mut()[k].copy_from_slice(v);
                    let z = forward(&graph, &probe).expect("valid");
                    total_loss(&z, &labels, &graph.edges, alpha)
                        .expect("valid")
                        .0
                },
                &x0,
                H,
            ));
            analytic.extend_from_slice(grads.tensors()[k]);
        }
        Ok(relative_error(&analytic, &numeric))
    })
}

/// Runs every check with `instances` random instances each.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    Ok(vec![
        check_dice_loss(instances, seed)?,
        check_softmax_ce(instances, seed)?,
        check_ncr_loss(instances, seed)?,
        check_total_loss(instances, seed)?,
        check_mean_sage(instances, seed)?,
        check_graph_norm(instances, seed)?,
        check_full_backward(instances, seed)?,
    ])
}
