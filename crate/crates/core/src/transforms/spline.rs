use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{NtcError, Result};

/// Default knot count for rate-conditioning splines.
pub const DEFAULT_KNOTS: usize = 25;

static CLAMP_WARNED: AtomicBool = AtomicBool::new(false);

/// Where a query falls among the knots: segment start, interpolation weight,
/// and whether the query had to be clamped into range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KnotPosition {
    pub lo: usize,
    pub t: f64,
    pub clamped: bool,
}

/// Locates `x` among strictly increasing `knots`.
pub fn locate(knots: &[f64], x: f64) -> KnotPosition {
    let last = knots.len() - 1;
    if x <= knots[0] {
        return KnotPosition {
            lo: 0,
            t: 0.0,
            clamped: x < knots[0],
        };
    }
    if x >= knots[last] {
        return KnotPosition {
            lo: last,
            t: 0.0,
            clamped: x > knots[last],
        };
    }
    let hi = knots.partition_point(|&k| k <= x);
    let lo = hi - 1;
    KnotPosition {
        lo,
        t: (x - knots[lo]) / (knots[hi] - knots[lo]),
        clamped: false,
    }
}

/// Piecewise-linear scalar interpolation, clamped to the end values.
pub fn spline_eval(knots: &[f64], values: &[f64], x: f64) -> Result<f64> {
    check_knots(knots)?;
    if values.len() != knots.len() {
        return Err(NtcError::dim(
            "spline_eval",
            format!("{} values for {} knots", values.len(), knots.len()),
        ));
    }
    let p = locate(knots, x);
    if p.t == 0.0 {
        Ok(values[p.lo])
    } else {
        Ok((1.0 - p.t) * values[p.lo] + p.t * values[p.lo + 1])
    }
}

fn check_knots(knots: &[f64]) -> Result<()> {
    if knots.len() < 2 {
        return Err(NtcError::InvalidArgument("a spline needs at least two knots".into()));
    }
    if knots.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(NtcError::InvalidArgument("spline knots must be strictly increasing".into()));
    }
    Ok(())
}

/// A vector-valued first-order spline over `log2(lambda)`: one row of
/// `values` per knot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSpline {
    pub knots: Vec<f64>,
    pub values: Tensor,
}

impl LambdaSpline {
    /// Spline whose value is `fill` everywhere, with `count` knots spread
    /// uniformly over `[log2(lambda_min), log2(lambda_max)]`.
    pub fn constant(lambda_min: f64, lambda_max: f64, count: usize, width: usize, fill: f64) -> Result<Self> {
        Self::from_rows(lambda_min, lambda_max, count, &vec![fill; width])
    }

    /// Every knot initialized to `row`.
    pub fn from_rows(lambda_min: f64, lambda_max: f64, count: usize, row: &[f64]) -> Result<Self> {
        if !(lambda_min > 0.0) || !(lambda_max > lambda_min) || count < 2 {
            return Err(NtcError::InvalidArgument(format!(
                "spline range [{lambda_min}, {lambda_max}] with {count} knots"
            )));
        }
        let (a, b) = (lambda_min.log2(), lambda_max.log2());
        let knots = (0..count)
            .map(|i| a + (b - a) * i as f64 / (count - 1) as f64)
            .collect();
        let mut data = Vec::with_capacity(count * row.len());
        for _ in 0..count {
            data.extend_from_slice(row);
        }
        Ok(LambdaSpline {
            knots,
            values: Tensor::new(vec![count, row.len()], data)?,
        })
    }

    pub fn width(&self) -> usize {
        self.values.cols()
    }

    pub fn validate(&self) -> Result<()> {
        check_knots(&self.knots)?;
        if self.values.shape().len() != 2 || self.values.shape()[0] != self.knots.len() {
            return Err(NtcError::dim(
                "LambdaSpline",
                format!("values {:?} for {} knots", self.values.shape(), self.knots.len()),
            ));
        }
        Ok(())
    }

    fn position(&self, lambda: f64) -> Result<KnotPosition> {
        if !(lambda > 0.0) {
            return Err(NtcError::domain("spline", format!("lambda {lambda}")));
        }
        let p = locate(&self.knots, lambda.log2());
        if p.clamped && !CLAMP_WARNED.swap(true, Ordering::Relaxed) {
            log::warn!(
                "lambda {lambda} outside conditioning range [{}, {}]; clamping",
                self.knots[0].exp2(),
                self.knots[self.knots.len() - 1].exp2()
            );
        }
        Ok(p)
    }

    /// Whether `lambda` lies outside the knot range.
    pub fn is_clamped(&self, lambda: f64) -> bool {
        lambda > 0.0 && locate(&self.knots, lambda.log2()).clamped
    }

    /// Interpolated row at `lambda`.
    pub fn eval(&self, lambda: f64) -> Result<Vec<f64>> {
        let p = self.position(lambda)?;
        let lo = self.values.row(p.lo);
        if p.t == 0.0 {
            return Ok(lo.to_vec());
        }
        let hi = self.values.row(p.lo + 1);
        Ok(lo.iter().zip(hi).map(|(a, b)| (1.0 - p.t) * a + p.t * b).collect())
    }

    /// Interpolated row as a tape node, differentiable in the knot values.
    pub fn eval_on_tape(&self, tape: &mut Tape, values: Var, lambda: f64) -> Result<Var> {
        let p = self.position(lambda)?;
        tape.lerp_rows(values, p.lo, p.t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_fixtures() {
        assert_eq!(spline_eval(&[0.0, 1.0], &[0.0, 10.0], 0.5).unwrap(), 5.0);
        assert_eq!(spline_eval(&[0.0, 1.0, 2.0], &[3.0; 3], 1.7).unwrap(), 3.0);
        assert_eq!(spline_eval(&[0.0, 1.0], &[2.0, 4.0], -5.0).unwrap(), 2.0);
        assert_eq!(spline_eval(&[0.0, 1.0], &[2.0, 4.0], 9.0).unwrap(), 4.0);
        assert!(spline_eval(&[1.0, 1.0], &[2.0, 4.0], 1.0).is_err());
        assert!(spline_eval(&[0.0], &[2.0], 0.0).is_err());
    }

    #[test]
    fn exact_at_knots() {
        let knots: Vec<f64> = (0..25).map(|i| i as f64 * 0.37 - 2.0).collect();
        let values: Vec<f64> = (0..25).map(|i| (i as f64).sin()).collect();
        for (k, v) in knots.iter().zip(&values) {
            assert_eq!(spline_eval(&knots, &values, *k).unwrap(), *v);
        }
    }

    #[test]
    fn lambda_spline_clamps() {
        let s = LambdaSpline::constant(10.0, 1000.0, 25, 3, 1.5).unwrap();
        assert_eq!(s.eval(1.0).unwrap(), vec![1.5; 3]);
        assert!(s.is_clamped(1.0));
        assert!(!s.is_clamped(100.0));
        assert!(s.eval(0.0).is_err());
    }
}
