//! Monte-Carlo summaries.

use serde::{Deserialize, Serialize};

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl McEstimate {
    pub fn from_samples(values: &[f64]) -> Self {
        let mut acc = Accumulator::default();
        for &v in values {
            acc.push(v);
        }
        acc.finish()
    }
}

/// Streaming mean/variance (Welford).
#[derive(Clone, Copy, Debug, Default)]
pub struct Accumulator {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Accumulator {
    pub fn push(&mut self, v: f64) {
        self.n += 1;
        let d = v - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (v - self.mean);
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn finish(&self) -> McEstimate {
        let se = if self.n > 1 {
            (self.m2 / (self.n - 1) as f64 / self.n as f64).sqrt()
        } else {
            0.0
        };
        McEstimate {
            mean: self.mean,
            se,
            n: self.n,
        }
    }
}

/// Mean and standard error of `a_i - b_i` (paired samples).
pub fn paired_difference(a: &[f64], b: &[f64]) -> McEstimate {
    assert_eq!(a.len(), b.len(), "paired samples must have equal length");
    let mut acc = Accumulator::default();
    for (x, y) in a.iter().zip(b) {
        acc.push(x - y);
    }
    acc.finish()
}

/// Plug-in entropy in bits of a histogram of counts.
pub fn plugin_entropy_bits(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / t;
            -p * p.log2()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_se() {
        let e = McEstimate::from_samples(&[1.0, 2.0, 3.0, 4.0]);
        assert!((e.mean - 2.5).abs() < 1e-15);
        // sample variance 5/3, se = sqrt(5/12)
        assert!((e.se - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn entropy_of_uniform() {
        assert!((plugin_entropy_bits(&[5, 5, 5, 5]) - 2.0).abs() < 1e-15);
        assert_eq!(plugin_entropy_bits(&[7, 0]), 0.0);
    }
}
