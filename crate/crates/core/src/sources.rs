//! Seeded samplers and densities for the two synthetic sources: the standard
//! Laplace scalar source and a curved two-dimensional "banana" source.

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{NtcError, Result};

/// Default standard deviation of the banana's ridge noise.
pub const BANANA_NOISE_SCALE: f64 = 0.25;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Independent random streams derived from one seed. Each consumer draws
/// from its own stream so that adding draws in one place never shifts the
/// values seen by another.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Noise = 3,
    Dither = 4,
    Validation = 5,
    Eval = 6,
    Offset = 7,
    Lambda = 8,
}

/// The generator for `(seed, stream, index)`; `index` separates multiple
/// independent uses of one stream (per shard, per grid point, ...).
pub fn stream_rng(seed: u64, stream: Stream, index: u32) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 32) | index as u64);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SourceSpec {
    /// Zero-mean Laplace with unit scale (variance 2).
    Laplace,
    /// `x = (u, (u^2 - 1)/2 + n)`, `u ~ N(0, 1)`, `n ~ N(0, noise_scale^2)`.
    Banana { noise_scale: f64 },
}

impl Default for SourceSpec {
    fn default() -> Self {
        SourceSpec::Laplace
    }
}

impl SourceSpec {
    pub fn banana() -> Self {
        SourceSpec::Banana {
            noise_scale: BANANA_NOISE_SCALE,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            SourceSpec::Laplace => 1,
            SourceSpec::Banana { .. } => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SourceSpec::Laplace => "laplace",
            SourceSpec::Banana { .. } => "banana",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SourceSpec::Banana { noise_scale } if !(*noise_scale > 0.0 && noise_scale.is_finite()) => {
                Err(NtcError::InvalidArgument(format!(
                    "banana noise scale must be positive, got {noise_scale}"
                )))
            }
            _ => Ok(()),
        }
    }

    /// Total variance (trace of the covariance).
    pub fn total_variance(&self) -> f64 {
        match self {
            SourceSpec::Laplace => 2.0,
            SourceSpec::Banana { noise_scale } => 1.0 + 0.5 + noise_scale * noise_scale,
        }
    }

    /// Draws `count` vectors from `rng` as a `[count x N]` tensor.
    pub fn sample_with(&self, count: usize, rng: &mut impl Rng) -> Tensor {
        let n = self.dim();
        let mut data = Vec::with_capacity(count * n);
        for _ in 0..count {
            match *self {
                SourceSpec::Laplace => data.push(laplace_inverse_cdf(rng.sample(Open01))),
                SourceSpec::Banana { noise_scale } => {
                    let u: f64 = rng.sample(StandardNormal);
                    let e: f64 = rng.sample(StandardNormal);
                    data.push(u);
                    data.push(0.5 * (u * u - 1.0) + noise_scale * e);
                }
            }
        }
        Tensor::new(vec![count, n], data).expect("sampler output is finite")
    }

    /// Natural-log density at a single point.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(NtcError::dim(
                "log_density",
                format!("{} coordinates for a {}-d source", x.len(), self.dim()),
            ));
        }
        Ok(match *self {
            SourceSpec::Laplace => -x[0].abs() - std::f64::consts::LN_2,
            SourceSpec::Banana { noise_scale } => {
                let r = x[1] - 0.5 * (x[0] * x[0] - 1.0);
                let z = r / noise_scale;
                -0.5 * x[0] * x[0] - LN_SQRT_2PI - 0.5 * z * z - LN_SQRT_2PI - noise_scale.ln()
            }
        })
    }

    pub fn density(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_density(x)?.exp())
    }
}

/// Draws `count` vectors using the data stream of `seed`.
pub fn sample(spec: &SourceSpec, count: usize, seed: u64) -> Result<Tensor> {
    spec.validate()?;
    if count == 0 {
        return Err(NtcError::InvalidArgument("sample count must be at least 1".into()));
    }
    Ok(spec.sample_with(count, &mut stream_rng(seed, Stream::Data, 0)))
}

/// Inverse CDF of the standard Laplace distribution on `(0, 1)`.
pub fn laplace_inverse_cdf(u: f64) -> f64 {
    if u < 0.5 {
        (2.0 * u).ln()
    } else {
        -(2.0 * (1.0 - u)).ln()
    }
}

pub fn laplace_cdf(x: f64) -> f64 {
    if x < 0.0 {
        0.5 * x.exp()
    } else {
        1.0 - 0.5 * (-x).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_fixtures() {
        let l = SourceSpec::Laplace;
        assert!((l.log_density(&[0.0]).unwrap() - 0.5f64.ln()).abs() < 1e-15);
        let b = SourceSpec::banana();
        let expected = -LN_SQRT_2PI + (-LN_SQRT_2PI - 0.25f64.ln());
        assert!((b.log_density(&[0.0, -0.5]).unwrap() - expected).abs() < 1e-14);
        assert!(b.log_density(&[0.0]).is_err());
    }

    #[test]
    fn inverse_cdf_round_trips() {
        for &u in &[1e-12, 0.1, 0.5, 0.73, 1.0 - 1e-12] {
            assert!((laplace_cdf(laplace_inverse_cdf(u)) - u).abs() < 1e-12);
        }
    }

    #[test]
    fn streams_are_independent() {
        let a: Vec<u64> = (0..4).map(|_| stream_rng(1, Stream::Data, 0).random()).collect();
        let b: u64 = stream_rng(1, Stream::Noise, 0).random();
        let c: u64 = stream_rng(1, Stream::Data, 1).random();
        assert_ne!(a[0], b);
        assert_ne!(a[0], c);
        assert!(a.iter().all(|&v| v == a[0]));
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(sample(&SourceSpec::Laplace, 0, 1).is_err());
        assert!(sample(&SourceSpec::Banana { noise_scale: 0.0 }, 4, 1).is_err());
    }
}
