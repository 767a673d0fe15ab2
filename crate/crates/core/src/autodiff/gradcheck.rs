//! Central finite-difference check of tape gradients.
//!
//! The numeric side only ever runs forward evaluations, so it stays
//! independent of the reverse pass it checks.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Worst normwise relative error over all inputs:
/// `max_i |analytic_i - numeric_i| / max(max_i |numeric_i|, max_i |analytic_i|, floor)`
/// per input tensor, with `floor = 1e-10`.
pub fn max_relative_error<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out)
            .item()
            .ok_or_else(|| Error::invalid("gradcheck: function must return a scalar"))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut max_diff = 0.0f64;
        let mut scale = 1e-10f64;
        for i in 0..input.len() {
            let x = input.data()[i];
            work[k].data_mut()[i] = x + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = x - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            max_diff = max_diff.max((a - numeric).abs());
            scale = scale.max(numeric.abs()).max(a.abs());
        }
        worst = worst.max(max_diff / scale);
    }
    Ok(worst)
}
