//! Layer primitives with explicit backward passes.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};

pub const GN_EPS: f64 = 1e-5;

/// Undirected adjacency lists; edge multiplicity is kept as given.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    lists: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut lists = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n || a == b {
                return Err(Error::InvalidInput(format!(
                    "edge ({a}, {b}) invalid for {n} nodes"
                )));
            }
            lists[a].push(b);
            lists[b].push(a);
        }
        Ok(Self { lists })
    }

    pub fn n_nodes(&self) -> usize {
        self.lists.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.lists[i]
    }

    /// Row i holds the mean of X over N(i), zero for isolated nodes.
    pub fn mean_aggregate(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(x.raw_dim());
        for (i, nb) in self.lists.iter().enumerate() {
            if nb.is_empty() {
                continue;
            }
            let w = 1.0 / nb.len() as f64;
            let mut row = out.row_mut(i);
            for &j in nb {
                row.scaled_add(w, &x.row(j));
            }
        }
        out
    }

    /// Adjoint of [`Self::mean_aggregate`].
    pub fn mean_aggregate_adjoint(&self, g: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(g.raw_dim());
        for (i, nb) in self.lists.iter().enumerate() {
            if nb.is_empty() {
                continue;
            }
            let w = 1.0 / nb.len() as f64;
            for &j in nb {
                out.row_mut(j).scaled_add(w, &g.row(i));
            }
        }
        out
    }
}

fn check_shapes(
    x: &Array2<f64>,
    adj: &Adjacency,
    w_self: &Array2<f64>,
    w_neigh: &Array2<f64>,
    bias: &Array1<f64>,
) -> Result<()> {
    let (n, f) = x.dim();
    let ok = n == adj.n_nodes()
        && w_self.nrows() == f
        && w_neigh.dim() == w_self.dim()
        && bias.len() == w_self.ncols();
    if ok {
        Ok(())
    } else {
        Err(Error::DimMismatch(format!(
            "mean_sage: X {:?}, {} nodes in graph, W_self {:?}, W_neigh {:?}, bias {}",
            x.dim(),
            adj.n_nodes(),
            w_self.dim(),
            w_neigh.dim(),
            bias.len()
        )))
    }
}

/// `X W_self + mean_{N(i)}(X) W_neigh + bias`. Also returns the aggregate.
pub fn mean_sage(
    x: &Array2<f64>,
    adj: &Adjacency,
    w_self: &Array2<f64>,
    w_neigh: &Array2<f64>,
    bias: &Array1<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_shapes(x, adj, w_self, w_neigh, bias)?;
    let agg = adj.mean_aggregate(x);
    let out = x.dot(w_self) + agg.dot(w_neigh) + bias;
    Ok((out, agg))
}

pub struct SageGrads {
    pub dx: Array2<f64>,
    pub dw_self: Array2<f64>,
    pub dw_neigh: Array2<f64>,
    pub dbias: Array1<f64>,
}

pub fn mean_sage_backward(
    x: &Array2<f64>,
    agg: &Array2<f64>,
    adj: &Adjacency,
    w_self: &Array2<f64>,
    w_neigh: &Array2<f64>,
    dout: &Array2<f64>,
) -> SageGrads {
    let dx = dout.dot(&w_self.t()) + adj.mean_aggregate_adjoint(&dout.dot(&w_neigh.t()));
    SageGrads {
        dx,
        dw_self: x.t().dot(dout),
        dw_neigh: agg.t().dot(dout),
        dbias: dout.sum_axis(Axis(0)),
    }
}

#[derive(Debug, Clone)]
pub struct GraphNormCache {
    pub mean: Array1<f64>,
    pub centered: Array2<f64>,
    pub sigma: Array1<f64>,
    pub normalized: Array2<f64>,
}

/// Per-feature normalisation over the nodes of one graph.
pub fn graph_norm(
    x: &Array2<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    alpha: &Array1<f64>,
) -> Result<(Array2<f64>, GraphNormCache)> {
    let (n, f) = x.dim();
    if n == 0 {
        return Err(Error::InvalidInput(
            "graph_norm needs at least one node".into(),
        ));
    }
    if gamma.len() != f || beta.len() != f || alpha.len() != f {
        return Err(Error::DimMismatch(format!(
            "graph_norm: {f} features, parameter lengths {} {} {}",
            gamma.len(),
            beta.len(),
            alpha.len()
        )));
    }
    let mean = x.mean_axis(Axis(0)).expect("n >= 1");
    let centered = x - &(&mean * alpha);
    let sigma = centered
        .mapv(|v| v * v)
        .mean_axis(Axis(0))
        .expect("n >= 1")
        .mapv(|v| (v + GN_EPS).sqrt());
    let normalized = &centered / &sigma;
    let out = &normalized * gamma + beta;
    Ok((
        out,
        GraphNormCache {
            mean,
            centered,
            sigma,
            normalized,
        },
    ))
}

pub struct GraphNormGrads {
    pub dx: Array2<f64>,
    pub dgamma: Array1<f64>,
    pub dbeta: Array1<f64>,
    pub dalpha: Array1<f64>,
}

pub fn graph_norm_backward(
    cache: &GraphNormCache,
    gamma: &Array1<f64>,
    alpha: &Array1<f64>,
    dout: &Array2<f64>,
) -> GraphNormGrads {
    let n = dout.nrows() as f64;
    let dgamma = (dout * &cache.normalized).sum_axis(Axis(0));
    let dbeta = dout.sum_axis(Axis(0));
    let dxhat = dout * gamma;
    let proj = (&dxhat * &cache.centered).sum_axis(Axis(0));
    let coef = &proj / &cache.sigma.mapv(|s| n * s * s * s);
    let dd = &dxhat / &cache.sigma - &(&cache.centered * &coef);
    let sum_dd = dd.sum_axis(Axis(0));
    let dx = &dd - &(&sum_dd * alpha / n);
    let dalpha = -(&cache.mean * &sum_dd);
    GraphNormGrads {
        dx,
        dgamma,
        dbeta,
        dalpha,
    }
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Passes `g` where the pre-activation was positive.
pub fn relu_backward(pre: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
    let mut out = g.clone();
    out.zip_mut_with(pre, |o, &p| {
        if p <= 0.0 {
            *o = 0.0
        }
    });
    out
}
