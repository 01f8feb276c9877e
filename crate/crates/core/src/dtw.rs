//! Dynamic time warping over cosine distances between frames.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

fn cosine_cost(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb).max(1e-12)
}

/// `[rows(a), rows(b)]` matrix of `1 - cos(a_i, b_j)`.
pub fn cost_matrix(a: &Tensor, b: &Tensor) -> Result<Vec<Vec<f64>>> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.cols() {
        return shape_err("dtw", a.shape(), b.shape());
    }
    Ok((0..a.rows())
        .map(|i| (0..b.rows()).map(|j| cosine_cost(a.row(i), b.row(j))).collect())
        .collect())
}

/// Minimal path cost from (0,0) to (n-1,m-1) with moves right, down and
/// diagonal, and the number of cells on that path (the shorter one on ties).
pub fn dtw_path(cost: &[Vec<f64>]) -> (f64, usize) {
    let n = cost.len();
    let m = cost[0].len();
    let mut acc = vec![vec![(f64::INFINITY, 0usize); m]; n];
    for i in 0..n {
        for j in 0..m {
            let best = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let mut best = (f64::INFINITY, usize::MAX);
                for (pi, pj) in [(i.wrapping_sub(1), j), (i, j.wrapping_sub(1)), (i.wrapping_sub(1), j.wrapping_sub(1))] {
                    if pi < n && pj < m {
                        let c = acc[pi][pj];
                        if c.0 < best.0 || (c.0 == best.0 && c.1 < best.1) {
                            best = c;
                        }
                    }
                }
                best
            };
            acc[i][j] = (best.0 + cost[i][j], best.1 + 1);
        }
    }
    acc[n - 1][m - 1]
}

/// Path-length-normalized DTW score between two `[F, D]` sequences.
pub fn dtw_score(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (total, len) = dtw_path(&cost_matrix(a, b)?);
    Ok(total / len as f64)
}
