use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares reverse-mode gradients of a scalar function against central
/// differences.
///
/// `f` builds the function on a fresh tape from one variable per entry of
/// `points`. Returns the max over every coordinate of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(f: F, points: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::config(format!("finite difference step must be positive, got {eps}")));
    }
    let eval = |pts: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.constant(p.clone())).collect();
        let y = f(&mut tape, &vars)?;
        let out = tape.value(y);
        if out.len() != 1 {
            return Err(Error::shape("finite_diff_check", format!("function output has shape {:?}", out.shape())));
        }
        let v = out.item();
        if !v.is_finite() {
            return Err(Error::NonFinite("function value during finite differencing".into()));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let y = f(&mut tape, &vars)?;
    let grads = tape.backward_scalar(y)?;

    let mut worst = 0.0f64;
    let mut perturbed: Vec<Tensor<f64>> = points.to_vec();
    for (slot, (&var, point)) in vars.iter().zip(points).enumerate() {
        let analytic = grads.get(var).cloned().unwrap_or_else(|| Tensor::zeros(point.shape()));
        if !analytic.is_finite() {
            return Err(Error::NonFinite(format!("analytic gradient of input {slot}")));
        }
        for i in 0..point.len() {
            let x0 = point.data()[i];
            perturbed[slot].data_mut()[i] = x0 + eps;
            let up = eval(&perturbed)?;
            perturbed[slot].data_mut()[i] = x0 - eps;
            let down = eval(&perturbed)?;
            perturbed[slot].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
