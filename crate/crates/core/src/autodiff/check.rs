use crate::error::{NtcError, Result};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Compares reverse-mode gradients of a scalar function against central
/// differences, returning the largest
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)` over coordinates.
///
/// `f` receives a fresh tape and the input recorded as a parameter, and must
/// return a single-element node.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(NtcError::InvalidArgument(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y)?;
    let analytic = grads.get_or_zeros(x, point);
    if !analytic.all_finite() {
        return Err(NtcError::NonFinite {
            context: "analytic gradient".into(),
        });
    }

    let eval = |p: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(p);
        let y = f(&mut tape, x)?;
        let v = tape.value(y).item();
        if !v.is_finite() {
            return Err(NtcError::NonFinite {
                context: "finite-difference evaluation".into(),
            });
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
