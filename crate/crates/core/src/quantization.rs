//! Hard rounding, dithered quantization and the differentiable stand-ins
//! used during training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{NtcError, Result};

/// Temperatures below this are treated as the identity map.
pub const SOFT_ROUND_MIN_TAU: f64 = 1e-6;

/// How latents are turned into (pseudo-)quantized values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum QuantizerMode {
    Hard { offset: Vec<f64> },
    Dithered,
    Noise,
    Soft { tau: f64 },
    StraightThrough { offset: Vec<f64> },
}

impl QuantizerMode {
    pub fn validate(&self) -> Result<()> {
        match self {
            QuantizerMode::Hard { offset } | QuantizerMode::StraightThrough { offset } => {
                check_offset(offset)
            }
            QuantizerMode::Soft { tau } if !(*tau > 0.0) => Err(NtcError::InvalidArgument(
                format!("soft rounding temperature must be positive, got {tau}"),
            )),
            _ => Ok(()),
        }
    }
}

pub(crate) fn check_offset(o: &[f64]) -> Result<()> {
    match o.iter().find(|v| !(-0.5..0.5).contains(*v)) {
        Some(v) => Err(NtcError::InvalidArgument(format!(
            "offset {v} outside [-1/2, 1/2)"
        ))),
        None => Ok(()),
    }
}

/// Wraps any real number into `[-1/2, 1/2)` modulo 1.
pub fn wrap_offset(o: f64) -> f64 {
    let w = o - o.round_ties_even();
    if w >= 0.5 {
        w - 1.0
    } else {
        w
    }
}

/// Nearest integer, exact halves to even.
pub fn round_int(y: &Tensor) -> Tensor {
    y.map(f64::round_ties_even)
}

/// `round(y - o) + o`, with `o` broadcast along the trailing axis.
pub fn dither_quantize(y: &Tensor, o: &[f64]) -> Result<Tensor> {
    if o.len() != y.cols() {
        return Err(NtcError::dim(
            "dither_quantize",
            format!("offset length {} vs latent dim {}", o.len(), y.cols()),
        ));
    }
    check_offset(o)?;
    let m = o.len();
    let data = y
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - o[i % m]).round_ties_even() + o[i % m])
        .collect();
    Tensor::new(y.shape().to_vec(), data)
}

/// Draws `count` values uniform on `[-1/2, 1/2)`.
pub fn uniform_noise(rng: &mut impl Rng, count: usize) -> Vec<f64> {
    (0..count).map(|_| rng.random::<f64>() - 0.5).collect()
}

/// `y + u` with `u` uniform on `[-1/2, 1/2)` elementwise.
pub fn add_uniform_noise(y: &Tensor, rng: &mut impl Rng) -> Tensor {
    let u = uniform_noise(rng, y.len());
    let data = y.data().iter().zip(u).map(|(a, b)| a + b).collect();
    Tensor::new(y.shape().to_vec(), data).expect("finite input plus bounded noise")
}

/// `s(y) = floor(y) + 1/2 + tanh(tau r) / (2 tanh(tau / 2))`, `r = y - floor(y) - 1/2`.
pub fn soft_round_scalar(y: f64, tau: f64) -> f64 {
    if tau < SOFT_ROUND_MIN_TAU {
        return y;
    }
    let fl = y.floor();
    let r = y - fl - 0.5;
    fl + 0.5 + 0.5 * (tau * r).tanh() / (0.5 * tau).tanh()
}

/// Derivative of [`soft_round_scalar`] with respect to `y`.
pub fn soft_round_dy(y: f64, tau: f64) -> f64 {
    if tau < SOFT_ROUND_MIN_TAU {
        return 1.0;
    }
    let r = y - y.floor() - 0.5;
    let t = (tau * r).tanh();
    0.5 * tau * (1.0 - t * t) / (0.5 * tau).tanh()
}

/// Derivative of [`soft_round_scalar`] with respect to `tau`.
pub fn soft_round_dtau(y: f64, tau: f64) -> f64 {
    if tau < SOFT_ROUND_MIN_TAU {
        return 0.0;
    }
    let r = y - y.floor() - 0.5;
    let t = (tau * r).tanh();
    let h = (0.5 * tau).tanh();
    0.5 * (r * (1.0 - t * t) * h - 0.5 * t * (1.0 - h * h)) / (h * h)
}

pub fn soft_round(y: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(NtcError::domain("soft_round", format!("temperature {tau}")));
    }
    Ok(y.map(|v| soft_round_scalar(v, tau)))
}

/// Soft-rounding temperature schedule: linear from 1 to 16 over the first
/// 80% of training, then held.
pub fn anneal_temperature(step: usize, total_steps: usize) -> f64 {
    const START: f64 = 1.0;
    const END: f64 = 16.0;
    const RAMP: f64 = 0.8;
    if total_steps == 0 {
        return END;
    }
    let progress = step as f64 / total_steps as f64;
    START + (END - START) * (progress / RAMP).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rounding_fixtures() {
        let y = Tensor::vector(vec![2.4, -2.4, 2.5, 3.5, -2.5, 7.0]);
        assert_eq!(round_int(&y).data(), &[2.0, -2.0, 2.0, 4.0, -2.0, 7.0]);
    }

    #[test]
    fn dither_fixtures() {
        let y = Tensor::vector(vec![0.26, 1.9]);
        let z = dither_quantize(&y, &[0.0]).err();
        assert!(z.is_some(), "length mismatch must be rejected");
        let y = Tensor::matrix(2, 1, vec![0.26, 1.9]).unwrap();
        assert_eq!(dither_quantize(&y, &[0.0]).unwrap(), round_int(&y));
        let on_lattice = Tensor::matrix(1, 1, vec![3.25]).unwrap();
        assert_eq!(dither_quantize(&on_lattice, &[0.25]).unwrap(), on_lattice);
        assert!(dither_quantize(&on_lattice, &[0.5]).is_err());
    }

    #[test]
    fn soft_round_limits() {
        for y in [-2.7, -0.1, 0.0, 0.3, 5.49] {
            assert!((soft_round_scalar(y, 1e-6) - y).abs() < 1e-6);
        }
        assert!((soft_round_scalar(2.3, 50.0) - 2.0).abs() < 1e-6);
        for tau in [0.01, 0.5, 3.0, 40.0, 1e3] {
            for k in [-3.0, 0.0, 4.0] {
                assert_eq!(soft_round_scalar(k + 0.5, tau), k + 0.5);
            }
        }
    }

    #[test]
    fn soft_round_converges_to_rounding_off_half_integers() {
        for i in 0..2000 {
            let y = -5.0 + i as f64 * 0.005 + 0.0013;
            let frac = y - y.floor();
            if (frac - 0.5).abs() < 0.01 {
                continue;
            }
            assert!((soft_round_scalar(y, 1e3) - y.round()).abs() < 1e-3, "y={y}");
        }
    }

    #[test]
    fn temperature_schedule() {
        assert_eq!(anneal_temperature(0, 100), 1.0);
        assert!((anneal_temperature(40, 100) - 8.5).abs() < 1e-12);
        assert_eq!(anneal_temperature(80, 100), 16.0);
        assert_eq!(anneal_temperature(100, 100), 16.0);
    }

    #[test]
    fn wrap_offset_range() {
        assert_eq!(wrap_offset(0.5), -0.5);
        assert_eq!(wrap_offset(-0.5), -0.5);
        assert!((wrap_offset(3.2) - 0.2).abs() < 1e-12);
        assert!((wrap_offset(-0.8) - 0.2).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn dither_is_shifted_rounding(y in -50.0f64..50.0, o in -0.5f64..0.5) {
            let t = Tensor::matrix(1, 1, vec![y]).unwrap();
            let q = dither_quantize(&t, &[o]).unwrap().item();
            prop_assert_eq!(q - o, (y - o).round_ties_even() + o - o);
            prop_assert!((q - y).abs() <= 0.5 + 1e-12);
        }

        #[test]
        fn soft_round_monotone_within_cell(
            cell in -4i32..4, a in 0.0f64..1.0, b in 0.0f64..1.0,
            tau_idx in 0usize..4,
        ) {
            prop_assume!((a - b).abs() > 1e-9);
            let tau = [0.5, 2.0, 8.0, 32.0][tau_idx];
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let (y1, y2) = (cell as f64 + lo, cell as f64 + hi);
            prop_assert!(soft_round_scalar(y1, tau) < soft_round_scalar(y2, tau)
                || (soft_round_scalar(y2, tau) - soft_round_scalar(y1, tau)).abs() < 1e-15);
        }

        #[test]
        fn soft_round_derivatives_match_differences(y in -3.0f64..3.0, tau in 0.3f64..20.0) {
            let frac = y - y.floor();
            prop_assume!(frac > 1e-3 && frac < 1.0 - 1e-3);
            let h = 1e-6;
            let ny = (soft_round_scalar(y + h, tau) - soft_round_scalar(y - h, tau)) / (2.0 * h);
            let nt = (soft_round_scalar(y, tau + h) - soft_round_scalar(y, tau - h)) / (2.0 * h);
            prop_assert!((ny - soft_round_dy(y, tau)).abs() < 1e-5 * ny.abs().max(1.0));
            prop_assert!((nt - soft_round_dtau(y, tau)).abs() < 1e-5 * nt.abs().max(1.0));
        }
    }
}
