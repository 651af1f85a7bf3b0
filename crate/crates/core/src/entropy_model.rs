//! Factorized logistic-mixture density over latents, the discrete PMF it
//! induces on a shifted integer lattice, and mode-based offset selection.

use serde::{Deserialize, Serialize};

use crate::autodiff::{MixtureParams, Tape, Tensor, Var, BIN_MASS_FLOOR};
use crate::error::{NtcError, Result};
use crate::quantization::{check_offset, wrap_offset};

/// Default number of logistic components per latent dimension.
pub const DEFAULT_COMPONENTS: usize = 8;
/// Symbols whose mass falls below this are trimmed from PMF tables.
pub const SUPPORT_MASS_THRESHOLD: f64 = 1e-9;
/// Largest absolute symbol a PMF table may contain.
pub const SUPPORT_CAP: i64 = 1 << 15;

/// Per-dimension mixture of logistic distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticMixtureDensity {
    pub logits: Tensor,
    pub loc: Tensor,
    pub log_scale: Tensor,
}

/// Tape handles for the density parameters.
#[derive(Clone, Copy, Debug)]
pub struct DensityVars {
    pub logits: Var,
    pub loc: Var,
    pub log_scale: Var,
}

impl LogisticMixtureDensity {
    /// Equal weights, locations spread evenly over `[-6, 6]`, scale 2.
    pub fn new(dim: usize, components: usize) -> Result<Self> {
        if dim == 0 || components == 0 {
            return Err(NtcError::InvalidArgument(
                "density needs at least one dimension and one component".into(),
            ));
        }
        let mut loc = Vec::with_capacity(dim * components);
        for _ in 0..dim {
            for c in 0..components {
                loc.push(if components == 1 {
                    0.0
                } else {
                    -6.0 + 12.0 * c as f64 / (components - 1) as f64
                });
            }
        }
        Ok(LogisticMixtureDensity {
            logits: Tensor::zeros(&[dim, components]),
            loc: Tensor::new(vec![dim, components], loc)?,
            log_scale: Tensor::full(&[dim, components], std::f64::consts::LN_2),
        })
    }

    /// A single logistic per dimension.
    pub fn single(locations: &[f64], scales: &[f64]) -> Result<Self> {
        if locations.len() != scales.len() || scales.iter().any(|s| !(*s > 0.0)) {
            return Err(NtcError::InvalidArgument("bad logistic parameters".into()));
        }
        let m = locations.len();
        Ok(LogisticMixtureDensity {
            logits: Tensor::zeros(&[m, 1]),
            loc: Tensor::new(vec![m, 1], locations.to_vec())?,
            log_scale: Tensor::new(vec![m, 1], scales.iter().map(|s| s.ln()).collect())?,
        })
    }

    pub fn dim(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn components(&self) -> usize {
        self.logits.shape()[1]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.logits, &self.loc, &self.log_scale]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.logits, &mut self.loc, &mut self.log_scale]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> DensityVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        DensityVars {
            logits: leaf(&self.logits),
            loc: leaf(&self.loc),
            log_scale: leaf(&self.log_scale),
        }
    }

    /// `[B x M]` node of per-dimension `log2` bin masses of `v`.
    pub fn log2_mass_on_tape(tape: &mut Tape, vars: DensityVars, v: Var) -> Result<Var> {
        tape.mixture_log2_mass(v, vars.logits, vars.loc, vars.log_scale)
    }

    pub(crate) fn mixture(&self) -> MixtureParams {
        MixtureParams::new(
            self.logits.data(),
            self.loc.data(),
            self.log_scale.data(),
            self.dim(),
            self.components(),
        )
    }

    /// `log2` of the noisy-latent density `prod_i [F_i(v_i + 1/2) - F_i(v_i - 1/2)]`,
    /// with each factor floored at the bin-mass floor.
    pub fn noisy_log2_density(&self, v: &[f64]) -> Result<f64> {
        if v.len() != self.dim() {
            return Err(NtcError::dim(
                "noisy_log2_density",
                format!("{} values for {} dims", v.len(), self.dim()),
            ));
        }
        let mix = self.mixture();
        Ok(v
            .iter()
            .enumerate()
            .map(|(i, &x)| mix.bin_mass(i, x).max(BIN_MASS_FLOOR).log2())
            .sum())
    }

    pub fn cdf(&self, dim: usize, x: f64) -> f64 {
        self.mixture().cdf(dim, x)
    }

    pub fn pdf(&self, dim: usize, x: f64) -> f64 {
        self.mixture().pdf(dim, x)
    }

    /// Unfloored bin mass `F(x + 1/2) - F(x - 1/2)` of one dimension.
    pub fn bin_mass(&self, dim: usize, x: f64) -> f64 {
        self.mixture().bin_mass(dim, x)
    }

    /// Interval `[min loc - w * s_max, max loc + w * s_max]` of dimension `dim`.
    fn span(&self, dim: usize, widths: f64) -> (f64, f64) {
        let c = self.components();
        let locs = &self.loc.data()[dim * c..(dim + 1) * c];
        let smax = self.log_scale.data()[dim * c..(dim + 1) * c]
            .iter()
            .map(|l| l.exp())
            .fold(0.0, f64::max);
        let lo = locs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = locs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo - widths * smax, hi + widths * smax)
    }

    /// Per-dimension probability tables `P(k; o) = p(k + o)`.
    pub fn discrete_pmf(&self, offset: &[f64]) -> Result<Vec<PmfTable>> {
        if offset.len() != self.dim() {
            return Err(NtcError::dim(
                "discrete_pmf",
                format!("{} offsets for {} dims", offset.len(), self.dim()),
            ));
        }
        check_offset(offset)?;
        let mix = self.mixture();
        let mut tables = Vec::with_capacity(self.dim());
        for (d, &o) in offset.iter().enumerate() {
            let (a, b) = self.span(d, 30.0);
            let lo = (a - o).floor();
            let hi = (b - o).ceil();
            if lo < -(SUPPORT_CAP as f64) || hi > SUPPORT_CAP as f64 {
                return Err(NtcError::SupportOverflow {
                    size: (hi - lo) as usize + 1,
                    limit: SUPPORT_CAP as usize,
                });
            }
            let (mut lo, mut hi) = (lo as i64, hi as i64);
            while lo < hi && mix.bin_mass(d, lo as f64 + o) < SUPPORT_MASS_THRESHOLD {
                lo += 1;
            }
            while hi > lo && mix.bin_mass(d, hi as f64 + o) < SUPPORT_MASS_THRESHOLD {
                hi -= 1;
            }
            let size = (hi - lo + 1) as usize;
            if size > SUPPORT_CAP as usize {
                return Err(NtcError::SupportOverflow {
                    size,
                    limit: SUPPORT_CAP as usize,
                });
            }
            let mut probs: Vec<f64> = (lo..=hi).map(|k| mix.bin_mass(d, k as f64 + o)).collect();
            // Everything beyond the extremes is folded into them.
            probs[0] = mix.cdf(d, lo as f64 + o + 0.5);
            let last = probs.len() - 1;
            if last > 0 {
                probs[last] = 1.0 - mix.cdf(d, hi as f64 + o - 0.5);
            } else {
                probs[0] = 1.0;
            }
            for p in probs.iter_mut() {
                *p = p.max(BIN_MASS_FLOOR);
            }
            let total: f64 = probs.iter().sum();
            for p in probs.iter_mut() {
                *p /= total;
            }
            tables.push(PmfTable { lo, probs });
        }
        Ok(tables)
    }

    /// Offsets placing an integer at the mode of each dimension's noisy
    /// density, or at the median when that density is not unimodal.
    pub fn select_offset_mode(&self) -> Vec<f64> {
        let mix = self.mixture();
        (0..self.dim())
            .map(|d| {
                let (a, b) = self.span(d, 10.0);
                let n = 20_000;
                let step = (b - a) / n as f64;
                let vals: Vec<f64> = (0..=n).map(|i| mix.bin_mass(d, a + i as f64 * step)).collect();
                let peak = vals.iter().cloned().fold(0.0, f64::max);
                let mut peaks = 0;
                let mut arg = 0;
                for i in 0..=n {
                    if vals[i] == peak {
                        arg = i;
                    }
                    let left = if i == 0 { f64::NEG_INFINITY } else { vals[i - 1] };
                    let right = if i == n { f64::NEG_INFINITY } else { vals[i + 1] };
                    // ignore flat numerical ripples far below the peak
                    if vals[i] > left && vals[i] >= right && vals[i] > 1e-3 * peak {
                        peaks += 1;
                    }
                }
                let center = if peaks <= 1 {
                    refine_max(|x| mix.bin_mass(d, x), a + arg as f64 * step, step)
                } else {
                    let (mut lo, mut hi) = (a, b);
                    for _ in 0..200 {
                        let mid = 0.5 * (lo + hi);
                        if mix.cdf(d, mid) < 0.5 {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                    0.5 * (lo + hi)
                };
                wrap_offset(center - center.round_ties_even())
            })
            .collect()
    }
}

/// Golden-section refinement of a maximum bracketed by `x0 +- step`.
fn refine_max(f: impl Fn(f64) -> f64, x0: f64, step: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (x0 - step, x0 + step);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    for _ in 0..100 {
        if f(c) > f(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - g * (b - a);
        d = a + g * (b - a);
    }
    0.5 * (a + b)
}

/// Probabilities of consecutive integer symbols `lo, lo + 1, ...`.
/// Symbols outside the table take the mass of the nearest extreme.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PmfTable {
    pub lo: i64,
    pub probs: Vec<f64>,
}

impl PmfTable {
    pub fn hi(&self) -> i64 {
        self.lo + self.probs.len() as i64 - 1
    }

    pub fn clamp_symbol(&self, k: i64) -> i64 {
        k.clamp(self.lo, self.hi())
    }

    pub fn prob(&self, k: i64) -> f64 {
        self.probs[(self.clamp_symbol(k) - self.lo) as usize]
    }

    pub fn neg_log2(&self, k: i64) -> f64 {
        -self.prob(k).log2()
    }

    pub fn entropy_bits(&self) -> f64 {
        self.probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum()
    }
}
