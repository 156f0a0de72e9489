//! Central finite-difference verification of recorded gradients.

use super::tape::{NodeId, Tape};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `|analytic − numeric| / max(1, |numeric|)` per coordinate, all inputs
    /// concatenated in order.
    pub rel_errors: Vec<f64>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Gradient check of a scalar function of one tensor.
///
/// `f` records its computation on the tape it is given, starting from the leaf
/// it receives, and returns the scalar root.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    grad_check_multi(|tape, ids| f(tape, ids[0]), std::slice::from_ref(x), h, tol)
}

/// Gradient check of a scalar function of several tensors at once.
pub fn grad_check_multi<F>(f: F, xs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = f(&mut tape, &ids)?;
        let v = tape.value(root);
        if !v.is_scalar() {
            return Err(Error::NonScalarRoot(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &ids)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<f64> = ids
        .iter()
        .flat_map(|&id| grads.get_or_zeros(&tape, id).into_data())
        .collect();

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut probe = xs.to_vec();
    for t in 0..xs.len() {
        for i in 0..xs[t].len() {
            let orig = xs[t].data()[i];
            probe[t].data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe[t].data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe[t].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFiniteTerm {
                    what: format!("function value at probe (input {t}, coordinate {i})"),
                });
            }
            numeric.push((plus - minus) / (2.0 * h));
        }
    }

    let rel_errors: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .collect();
    let max_rel_err = rel_errors.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        analytic,
        numeric,
        passed: max_rel_err < tol && rel_errors.iter().all(|e| e.is_finite()),
        rel_errors,
        max_rel_err,
        tol,
    })
}
