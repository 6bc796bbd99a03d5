//! Central finite-difference checks for tape gradients (f64 only).

use crate::error::Result;
use crate::numerics::graph::{Graph, Var};
use crate::numerics::tensor::Tensor;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-6;

/// Magnitude below which gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Worst relative error between tape and finite-difference gradients of
/// the scalar returned by `f` w.r.t. every element of every input.
pub fn max_rel_error<F>(inputs: &[Tensor<f64>], f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    max_rel_error_with_step(inputs, FD_STEP, f)
}

/// [`max_rel_error`] with an explicit difference step. Deep compositions
/// accumulate more rounding in the loss, so a slightly larger step keeps
/// the difference quotient's noise below the tolerance.
pub fn max_rel_error_with_step<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v);
        for i in 0..work[k].numel() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}
