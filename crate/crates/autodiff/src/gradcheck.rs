//! Finite-difference verification of analytic gradients.

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Compares the reverse-mode gradient of a scalar function with central
/// differences and returns `max_i |analytic_i − fd_i| / max(1, |analytic_i|)`.
///
/// `f` receives a fresh graph and the point as a gradient-requiring leaf. It
/// must be deterministic: any randomness (such as Gumbel noise) has to be
/// fixed outside of it. Two evaluations at `point` that differ are rejected.
pub fn check_gradients<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let analytic = analytic_gradient(&f, point)?;
    let first = evaluate(&f, point)?;
    let second = evaluate(&f, point)?;
    if first.to_bits() != second.to_bits() {
        return Err(AutodiffError::NonDeterministic { first, second });
    }

    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let x = point.data()[i];
        probe.data_mut()[i] = x + step;
        let up = evaluate(&f, &probe)?;
        probe.data_mut()[i] = x - step;
        let down = evaluate(&f, &probe)?;
        probe.data_mut()[i] = x;
        let fd = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - fd).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// Reverse-mode gradient of `f` at `point`.
pub fn analytic_gradient<F>(f: &F, point: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone(), true);
    let loss = f(&mut g, x)?;
    let grads = g.backward(loss)?;
    Ok(grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape())))
}

fn evaluate<F>(f: &F, point: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone(), true);
    let loss = f(&mut g, x)?;
    let v = g.value(loss);
    if !v.is_scalar() {
        return Err(AutodiffError::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}
