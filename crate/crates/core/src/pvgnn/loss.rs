//! Node classification losses on logits.

use ndarray::Array2;

use crate::error::{Error, Result};

fn check_labels(z: &Array2<f64>, labels: &[usize]) -> Result<()> {
    if labels.len() != z.nrows() {
        return Err(Error::DimMismatch(format!(
            "{} labels for {} logit rows",
            labels.len(),
            z.nrows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= z.ncols()) {
        return Err(Error::InvalidInput(format!(
            "label {bad} outside 0..{}",
            z.ncols()
        )));
    }
    Ok(())
}

/// Mean cross-entropy of softmax(Z) against `labels`.
pub fn softmax_ce(z: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    check_labels(z, labels)?;
    let n = z.nrows();
    if n == 0 {
        return Ok((0.0, Array2::zeros(z.raw_dim())));
    }
    let mut grad = Array2::zeros(z.raw_dim());
    let mut loss = 0.0;
    for (i, row) in z.rows().into_iter().enumerate() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        loss += lse - row[labels[i]];
        for (c, &v) in row.iter().enumerate() {
            grad[[i, c]] = (v - lse).exp() / n as f64;
        }
        grad[[i, labels[i]]] -= 1.0 / n as f64;
    }
    Ok((loss / n as f64, grad))
}

/// Sum of `||z_i - z_j||` over same-label edges, divided by the number of
/// edges. Subgradient 0 where `z_i == z_j`.
pub fn ncr_loss(
    z: &Array2<f64>,
    labels: &[usize],
    edges: &[(usize, usize)],
) -> Result<(f64, Array2<f64>)> {
    check_labels(z, labels)?;
    let mut grad = Array2::zeros(z.raw_dim());
    if edges.is_empty() {
        return Ok((0.0, grad));
    }
    let m = edges.len() as f64;
    let mut loss = 0.0;
    for &(i, j) in edges {
        if i >= z.nrows() || j >= z.nrows() {
            return Err(Error::InvalidInput(format!("edge ({i}, {j}) out of range")));
        }
        if labels[i] != labels[j] {
            continue;
        }
        let diff = &z.row(i) - &z.row(j);
        let norm = diff.dot(&diff).sqrt();
        loss += norm;
        if norm > 0.0 {
            let g = diff / (norm * m);
            grad.row_mut(i).scaled_add(1.0, &g);
            grad.row_mut(j).scaled_add(-1.0, &g);
        }
    }
    Ok((loss / m, grad))
}

pub fn total_loss(
    z: &Array2<f64>,
    labels: &[usize],
    edges: &[(usize, usize)],
    alpha_ncr: f64,
) -> Result<(f64, Array2<f64>)> {
    let (ce, mut grad) = softmax_ce(z, labels)?;
    if alpha_ncr == 0.0 {
        return Ok((ce, grad));
    }
    let (ncr, g) = ncr_loss(z, labels, edges)?;
    grad.scaled_add(alpha_ncr, &g);
    Ok((ce + alpha_ncr * ncr, grad))
}
