//! Central finite-difference verification of tape gradients.

use crate::{Result, Tape, Tensor, TensorError, Var};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares the tape gradient of a scalar function against central finite
/// differences and returns the worst relative error
/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)` over all
/// coordinates of `x`.
///
/// `f` receives a fresh tape and the recorded input and must return a scalar.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(Tensor::new(x.shape().to_vec(), data)?);
        let o = f(&mut t, v)?;
        t.value(o).item()
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += step;
        let mut minus = x.data().to_vec();
        minus[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        if !numeric.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
