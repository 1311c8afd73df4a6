//! Central-difference check of tape gradients.

use rayon::prelude::*;

use crate::autograd::{Tape, Var};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

pub const MIN_EPS: f64 = 1e-7;
pub const MAX_EPS: f64 = 1e-4;

fn eval_scalar<F>(f: &F, x: Tensor) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::no_grad();
    let out = f(tape.leaf(x))?;
    let v = out.value();
    if v.len() != 1 {
        return Err(invalid(format!("grad_check: function must return a scalar, got {}", v.shape())));
    }
    Ok(v.data()[0])
}

/// Compare the tape gradient of the scalar function `f` at `x` with central
/// differences of step `eps`.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>> + Sync,
{
    if !(MIN_EPS..=MAX_EPS).contains(&eps) {
        return Err(invalid(format!("grad_check: eps {eps} outside [{MIN_EPS}, {MAX_EPS}]")));
    }
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(leaf)?;
    let analytic = tape.backward(out)?.wrt(leaf);

    let numeric = (0..x.len())
        .into_par_iter()
        .map(|i| {
            let mut plus = x.clone().into_data();
            let mut minus = plus.clone();
            plus[i] += eps;
            minus[i] -= eps;
            let fp = eval_scalar(&f, Tensor::from_vec(x.shape(), plus)?)?;
            let fm = eval_scalar(&f, Tensor::from_vec(x.shape(), minus)?)?;
            Ok((fp - fm) / (2.0 * eps))
        })
        .collect::<Result<Vec<f64>>>()?;

    Ok(analytic
        .data()
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max))
}
