//! Central finite-difference verification of analytic gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{MantaError, Result};
use crate::exec::Exec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// max over coordinates of `|analytic - numeric| / max(1, |numeric|)`
    pub max_rel_error: f64,
    pub worst_index: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares `analytic` against central differences of `f` around `point`.
pub fn compare_gradients<F>(f: F, point: &[f64], analytic: &[f64], eps: f64, exec: Exec) -> Result<GradCheck>
where
    F: Fn(&[f64]) -> Result<f64> + Sync + Send,
{
    assert_eq!(point.len(), analytic.len(), "analytic gradient length");
    let probes = exec.map_range(point.len(), |i| -> Result<f64> {
        let mut x = point.to_vec();
        x[i] = point[i] + eps;
        let up = f(&x)?;
        x[i] = point[i] - eps;
        let down = f(&x)?;
        if !up.is_finite() || !down.is_finite() || !analytic[i].is_finite() {
            return Err(MantaError::NonFinite {
                what: "gradient probe".into(),
                index: i,
            });
        }
        let numeric = (up - down) / (2.0 * eps);
        Ok((analytic[i] - numeric).abs() / numeric.abs().max(1.0))
    });
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
    };
    for (i, e) in probes.into_iter().enumerate() {
        let e = e?;
        if e > report.max_rel_error {
            report = GradCheck {
                max_rel_error: e,
                worst_index: i,
            };
        }
    }
    Ok(report)
}

/// Gradient check for a scalar function built on a fresh graph from one
/// input leaf.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var> + Sync + Send,
{
    let mut g = Graph::new();
    let x = g.param(point);
    let loss = f(&mut g, x)?;
    g.backward(loss)?;
    let analytic = g.grad(x).map_or_else(|| vec![0.0; point.len()], <[f64]>::to_vec);
    let shape = point.shape().to_vec();
    let value = |data: &[f64]| -> Result<f64> {
        let mut g = Graph::new();
        let t = Tensor::new(&shape, data.to_vec())?;
        let x = g.constant(&t);
        let loss = f(&mut g, x)?;
        Ok(g.scalar(loss))
    };
    compare_gradients(value, point.data(), &analytic, eps, Exec::Sequential)
}
