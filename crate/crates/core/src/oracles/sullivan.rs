use serde::{Deserialize, Serialize};

use super::{QuantizerDescription, RdPoint};
use crate::error::{NtcError, Result};

/// Tail mass below which the outermost cell extends to infinity.
const TAIL_MASS: f64 = 1e-12;
const LN_CENTER_MIN: f64 = -9.0;
const LN_CENTER_MAX: f64 = 3.7;
const LN_STEP_MIN: f64 = -7.0;
const LN_STEP_MAX: f64 = 3.7;

/// Symmetric scalar quantizer for the standard Laplace source: a center cell
/// `[-c, c]` reconstructed at 0, then cells of equal width `step` on both
/// sides reconstructed at their centroids, the outermost running to infinity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SullivanFamily {
    pub center_half_width: f64,
    pub step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SullivanResult {
    pub family: SullivanFamily,
    pub point: RdPoint,
}

/// Conditional variance of an exponential truncated to `[0, w)`.
fn truncated_exp_variance(w: f64) -> f64 {
    if w < 1e-4 {
        return w * w / 12.0;
    }
    let em1 = w.exp_m1();
    1.0 - w * w * w.exp() / (em1 * em1)
}

/// Centroid offset of an exponential truncated to `[0, w)`.
fn truncated_exp_mean(w: f64) -> f64 {
    if w < 1e-4 {
        return w / 2.0 - w * w / 12.0;
    }
    1.0 - w / w.exp_m1()
}

/// Number of finite outer cells per side.
fn outer_cells(f: &SullivanFamily) -> usize {
    let a_max = (0.5 / TAIL_MASS).ln();
    if f.center_half_width >= a_max {
        0
    } else {
        ((a_max - f.center_half_width) / f.step).ceil() as usize
    }
}

/// Exact rate (bits) and distortion of a family member.
pub fn laplace_family_rd(f: &SullivanFamily) -> (f64, f64) {
    let c = f.center_half_width;
    let w = f.step;
    let p0 = -(-c).exp_m1();
    let mut rate = if p0 > 0.0 { -p0 * p0.log2() } else { 0.0 };
    // integral of x^2 e^-x over [0, c]
    let mut dist = 2.0 - (-c).exp() * (c * c + 2.0 * c + 2.0);
    let var_w = truncated_exp_variance(w);
    let mass_factor = -(-w).exp_m1();
    let cells = outer_cells(f);
    for i in 0..cells {
        let a = c + i as f64 * w;
        let p = 0.5 * (-a).exp() * mass_factor;
        if p > 0.0 {
            rate -= 2.0 * p * p.log2();
            dist += 2.0 * p * var_w;
        }
    }
    let a_last = c + cells as f64 * w;
    let p_last = 0.5 * (-a_last).exp();
    if p_last > 0.0 {
        rate -= 2.0 * p_last * p_last.log2();
        dist += 2.0 * p_last;
    }
    (rate.max(0.0), dist)
}

/// Explicit cells of a family member.
pub fn sullivan_quantizer(f: &SullivanFamily) -> Result<QuantizerDescription> {
    if !(f.center_half_width > 0.0 && f.step > 0.0) {
        return Err(NtcError::InvalidArgument(format!("invalid family member {f:?}")));
    }
    let c = f.center_half_width;
    let w = f.step;
    let cells = outer_cells(f);
    let mean_w = truncated_exp_mean(w);
    let mass_factor = -(-w).exp_m1();
    // positive side, inner to outer
    let mut pos_bounds = Vec::new();
    let mut pos_codes = Vec::new();
    let mut pos_pmf = Vec::new();
    for i in 0..cells {
        let a = c + i as f64 * w;
        pos_bounds.push(a);
        pos_codes.push(a + mean_w);
        pos_pmf.push(0.5 * (-a).exp() * mass_factor);
    }
    let a_last = c + cells as f64 * w;
    pos_bounds.push(a_last);
    pos_codes.push(a_last + 1.0);
    pos_pmf.push(0.5 * (-a_last).exp());

    let mut boundaries: Vec<f64> = pos_bounds.iter().rev().map(|b| -b).collect();
    boundaries.extend_from_slice(&pos_bounds);
    let mut codevectors: Vec<f64> = pos_codes.iter().rev().map(|v| -v).collect();
    codevectors.push(0.0);
    codevectors.extend_from_slice(&pos_codes);
    let mut pmf: Vec<f64> = pos_pmf.iter().rev().cloned().collect();
    pmf.push(-(-c).exp_m1());
    pmf.extend_from_slice(&pos_pmf);
    // Cells far out in the tail can underflow to zero mass; floor them so
    // the description stays codable.
    for p in pmf.iter_mut() {
        *p = p.max(f64::MIN_POSITIVE);
    }
    QuantizerDescription::one_d(boundaries, codevectors, pmf)
}

fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}

/// Best member of the family for `R + lambda * D`.
///
/// A coarse grid over `(log step, log c)` locates the basin, then nested
/// golden-section searches refine both parameters in log coordinates.
pub fn sullivan_ecsq(lambda: f64) -> Result<SullivanResult> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(NtcError::InvalidArgument(format!("lambda {lambda}")));
    }
    let lag = |ls: f64, lc: f64| {
        let (r, d) = laplace_family_rd(&SullivanFamily {
            center_half_width: lc.exp(),
            step: ls.exp(),
        });
        r + lambda * d
    };
    let grid = 80;
    let hs = (LN_STEP_MAX - LN_STEP_MIN) / grid as f64;
    let hc = (LN_CENTER_MAX - LN_CENTER_MIN) / grid as f64;
    let (mut bi, mut bj, mut best) = (0, 0, f64::INFINITY);
    for i in 0..=grid {
        for j in 0..=grid {
            let v = lag(LN_STEP_MIN + i as f64 * hs, LN_CENTER_MIN + j as f64 * hc);
            if v < best {
                best = v;
                bi = i;
                bj = j;
            }
        }
    }
    let s_lo = LN_STEP_MIN + (bi as f64 - 1.5).max(0.0) * hs;
    let s_hi = LN_STEP_MIN + (bi as f64 + 1.5).min(grid as f64) * hs;
    let c_lo = LN_CENTER_MIN + (bj as f64 - 1.5).max(0.0) * hc;
    let c_hi = LN_CENTER_MIN + (bj as f64 + 1.5).min(grid as f64) * hc;
    let inner = |ls: f64| golden_min(|lc| lag(ls, lc), c_lo, c_hi, 1e-9);
    let (ls, _) = golden_min(|ls| inner(ls).1, s_lo, s_hi, 1e-9);
    let (lc, value) = inner(ls);
    let (ls, lc) = if value <= best {
        (ls, lc)
    } else {
        (LN_STEP_MIN + bi as f64 * hs, LN_CENTER_MIN + bj as f64 * hc)
    };
    let family = SullivanFamily {
        center_half_width: lc.exp(),
        step: ls.exp(),
    };
    let (rate, distortion) = laplace_family_rd(&family);
    Ok(SullivanResult {
        family,
        point: RdPoint::exact(rate, distortion, lambda, "sullivan"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_lambda_collapses_to_one_cell() {
        let r = sullivan_ecsq(1e-3).unwrap();
        assert!(r.point.rate < 1e-3, "{:?}", r.point);
        assert!((r.point.distortion - 2.0).abs() < 1e-2);
    }

    #[test]
    fn description_is_symmetric_and_normalized() {
        let r = sullivan_ecsq(100.0).unwrap();
        let QuantizerDescription::OneD {
            boundaries,
            codevectors,
            pmf,
            ..
        } = sullivan_quantizer(&r.family).unwrap()
        else {
            unreachable!()
        };
        let n = boundaries.len();
        for i in 0..n {
            assert!((boundaries[i] + boundaries[n - 1 - i]).abs() < 1e-12);
        }
        let m = codevectors.len();
        for i in 0..m {
            assert!((codevectors[i] + codevectors[m - 1 - i]).abs() < 1e-12);
        }
        assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let ent: f64 = pmf.iter().map(|p| -p * p.log2()).sum();
        assert!((ent - r.point.rate).abs() < 1e-9);
    }

    #[test]
    fn truncated_exponential_moments_match_quadrature() {
        for w in [1e-5, 0.01, 0.3, 2.0, 9.0] {
            let n = 200_000;
            let h = w / n as f64;
            let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
            for i in 0..n {
                let x = (i as f64 + 0.5) * h;
                let p = (-x).exp() * h;
                m0 += p;
                m1 += x * p;
                m2 += x * x * p;
            }
            let mean = m1 / m0;
            let var = m2 / m0 - mean * mean;
            assert!((mean - truncated_exp_mean(w)).abs() < 1e-8 * w.max(1.0), "w={w}");
            assert!((var - truncated_exp_variance(w)).abs() < 1e-7 * w.max(1.0) * w.max(1.0), "w={w}");
        }
    }

    #[test]
    fn optimum_beats_neighbours() {
        let r = sullivan_ecsq(30.0).unwrap();
        let l = r.point.lagrangian();
        for (dc, ds) in [(1.01, 1.0), (0.99, 1.0), (1.0, 1.01), (1.0, 0.99)] {
            let f = SullivanFamily {
                center_half_width: r.family.center_half_width * dc,
                step: r.family.step * ds,
            };
            let (rr, dd) = laplace_family_rd(&f);
            assert!(rr + 30.0 * dd >= l - 1e-10);
        }
    }
}
