//! Central-difference gradient oracle and the graph-level gradient check.
//!
//! The finite-difference estimate is computed without touching the
//! reverse-mode code path, so it stays an independent witness.

use crate::error::{Error, Result};
use crate::par;

use super::graph::{ComputeGraph, NamedTensors, NodeId};
use super::tensor::Tensor;

/// Central-difference gradient of a scalar function at `point`:
/// `(f(x + h e_i) - f(x - h e_i)) / (2 h)` per coordinate.
pub fn finite_diff_gradient<F>(f: F, point: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64> + Sync,
{
    if h <= 0.0 {
        return Err(Error::input("finite_diff_gradient: h must be positive"));
    }
    let grads = par::try_map_indices(point.len(), |i| {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let fp = f(&plus)?;
        let fm = f(&minus)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::numeric(format!(
                "finite_diff_gradient: non-finite evaluation at coordinate {i}"
            )));
        }
        Ok((fp - fm) / (2.0 * h))
    })?;
    Tensor::new(point.shape().to_vec(), grads)
}

/// Worst relative disagreement between reverse-mode and finite-difference
/// gradients over every parameter of `graph`, at the given inputs.
///
/// Relative error uses `|a - b| / max(|a|, |b|, 0.001)`: tiny components
/// are compared absolutely so finite-difference round-off noise cannot
/// fail the check.
pub fn gradient_check(
    graph: &ComputeGraph,
    inputs: &NamedTensors,
    loss: NodeId,
    h: f64,
) -> Result<GradCheckReport> {
    let eval = graph.evaluate(inputs)?;
    let analytic = graph.backward(&eval, loss)?;

    let mut worst = 0.0_f64;
    let mut worst_param = String::new();
    for (name, value) in graph.params() {
        let loss_of = |candidate: &Tensor| -> Result<f64> {
            let mut probe = graph.clone();
            probe.params_mut().insert(name.clone(), candidate.clone());
            let e = probe.evaluate(inputs)?;
            e.value(loss).scalar_value()
        };
        let numeric = finite_diff_gradient(loss_of, value, h)?;
        let a = &analytic[name];
        for i in 0..a.len() {
            let (x, y) = (a.data()[i], numeric.data()[i]);
            let denom = x.abs().max(y.abs()).max(1e-3);
            let rel = (x - y).abs() / denom;
            if rel > worst {
                worst = rel;
                worst_param = name.clone();
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        worst_param,
    })
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        // f(x) = x^2 at x = 3: central differences are exact for quadratics.
        let f = |t: &Tensor| Ok(t.data()[0] * t.data()[0]);
        let g = finite_diff_gradient(f, &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn linear_gradient_is_all_ones() {
        let f = |t: &Tensor| Ok(t.data().iter().sum());
        let point = Tensor::new(vec![4], vec![0.3, -1.0, 2.5, 7.0]).unwrap();
        let g = finite_diff_gradient(f, &point, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_non_positive_h() {
        let f = |t: &Tensor| Ok(t.data()[0]);
        assert!(finite_diff_gradient(f, &Tensor::scalar(0.0), 0.0).is_err());
    }

    #[test]
    fn non_finite_evaluation_is_a_numeric_error() {
        let f = |t: &Tensor| Ok(t.data()[0].ln());
        let err = finite_diff_gradient(f, &Tensor::scalar(0.0), 1e-5).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }
}
