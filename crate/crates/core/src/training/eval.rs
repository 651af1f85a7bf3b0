use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, BIN_MASS_FLOOR};
use crate::entropy_model::PmfTable;
use crate::error::{NtcError, Result};
use crate::quantization::uniform_noise;
use crate::rd::{for_each_eval_chunk, RdAccumulator, RdPoint};
use crate::sources::{stream_rng, SourceSpec, Stream};
use crate::stats::{paired_difference, Accumulator, McEstimate};

use super::model::{quantize_indices, NtcModel};

/// How the operational quantizer chooses its offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum OperationMode {
    /// One offset shared by every vector, coded with `P(k; o)`.
    FixedOffset { offset: Vec<f64> },
    /// A fresh uniform offset per vector, known to both sides, coded with
    /// `P(k; o) = p(k + o)` for the drawn `o`.
    Dithered,
}

/// Per-sample `(rate, distortion)` of hard quantization of latents `y` at
/// `offset`, decoding each distinct index vector once.
pub fn hard_samples(
    model: &NtcModel,
    x: &Tensor,
    y: &Tensor,
    offset: &[f64],
    tables: &[PmfTable],
    lambda: f64,
) -> Result<Vec<(f64, f64)>> {
    let m = model.latent_dim();
    let n = model.source_dim();
    let k = quantize_indices(y, offset);
    let mut unique: HashMap<&[i64], usize> = HashMap::new();
    let mut order: Vec<&[i64]> = Vec::new();
    let mut slot = Vec::with_capacity(k.len() / m);
    for row in k.chunks(m) {
        let next = order.len();
        let id = *unique.entry(row).or_insert_with(|| {
            order.push(row);
            next
        });
        slot.push(id);
    }
    let flat: Vec<i64> = order.iter().flat_map(|r| r.iter().copied()).collect();
    let recon = model.decode_indices(&flat, offset, lambda)?;
    let rates: Vec<f64> = order
        .iter()
        .map(|r| r.iter().zip(tables).map(|(&kk, t)| t.neg_log2(kk)).sum())
        .collect();
    Ok(x
        .data()
        .chunks(n)
        .zip(&slot)
        .map(|(xr, &id)| {
            let d: f64 = xr
                .iter()
                .zip(recon.row(id))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            (rates[id], d)
        })
        .collect())
}

/// Operational rate and distortion on `n` fresh samples.
pub fn eval_operational_rd(
    model: &NtcModel,
    source: &SourceSpec,
    mode: &OperationMode,
    lambda: f64,
    n: usize,
    seed: u64,
) -> Result<RdPoint> {
    if source.dim() != model.source_dim() {
        return Err(NtcError::dim("eval_operational_rd", "source/model dimension"));
    }
    let m = model.latent_dim();
    let mut acc = RdAccumulator::new(lambda);
    let label = match mode {
        OperationMode::FixedOffset { .. } => "fixed_offset",
        OperationMode::Dithered => "dithered",
    };
    let mut chunk = 0u32;
    match mode {
        OperationMode::FixedOffset { offset } => {
            let tables = model.pmf_tables(offset)?;
            for_each_eval_chunk(source, n, seed, Stream::Eval, |x| {
                let y = model.analyze(x, lambda)?;
                for (r, d) in hard_samples(model, x, &y, offset, &tables, lambda)? {
                    acc.push(r, d);
                }
                Ok(())
            })?;
        }
        OperationMode::Dithered => {
            for_each_eval_chunk(source, n, seed, Stream::Eval, |x| {
                let rows = x.rows();
                let o = uniform_noise(&mut stream_rng(seed, Stream::Dither, chunk), rows * m);
                chunk += 1;
                let y = model.analyze(x, lambda)?;
                let mut shifted = Vec::with_capacity(rows * m);
                let mut rates = vec![0.0; rows];
                for (i, (&yv, &ov)) in y.data().iter().zip(&o).enumerate() {
                    let q = (yv - ov).round_ties_even() + ov;
                    rates[i / m] -= model.density.bin_mass(i % m, q).max(BIN_MASS_FLOOR).log2();
                    shifted.push(q);
                }
                let x_hat = model.synthesize(&Tensor::new(vec![rows, m], shifted)?, lambda)?;
                for (i, (xr, hr)) in x.data().chunks(model.source_dim()).zip(x_hat.data().chunks(model.source_dim())).enumerate() {
                    let d: f64 = xr.iter().zip(hr).map(|(a, b)| (a - b) * (a - b)).sum();
                    acc.push(rates[i], d);
                }
                Ok(())
            })?;
        }
    }
    Ok(acc.finish(label))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub offset: f64,
    pub lagrangian: f64,
    pub se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetSearch {
    pub offset: Vec<f64>,
    /// Lagrangian as a function of each dimension's offset, with the other
    /// dimensions at their selected values.
    pub curves: Vec<Vec<CurvePoint>>,
}

fn offset_grid(size: usize) -> Vec<f64> {
    (0..size).map(|j| -0.5 + j as f64 / size as f64).collect()
}

/// Per-dimension grid search for the offset minimizing the fixed-offset
/// Lagrangian, on `n` samples shared by every grid point.
pub fn select_offset_grid(
    model: &NtcModel,
    source: &SourceSpec,
    lambda: f64,
    grid_size: usize,
    n: usize,
    seed: u64,
) -> Result<OffsetSearch> {
    if grid_size < 8 {
        return Err(NtcError::InvalidArgument("offset grid needs at least 8 points".into()));
    }
    let x = source.sample_with(n, &mut stream_rng(seed, Stream::Offset, 0));
    let y = model.analyze(&x, lambda)?;
    let m = model.latent_dim();
    let mut offset = vec![0.0; m];
    let mut curves = Vec::with_capacity(m);
    for d in 0..m {
        let mut curve = Vec::with_capacity(grid_size);
        for o in offset_grid(grid_size) {
            let mut trial = offset.clone();
            trial[d] = o;
            let tables = model.pmf_tables(&trial)?;
            let mut acc = Accumulator::default();
            for (r, dist) in hard_samples(model, &x, &y, &trial, &tables, lambda)? {
                acc.push(r + lambda * dist);
            }
            let e = acc.finish();
            curve.push(CurvePoint {
                offset: o,
                lagrangian: e.mean,
                se: e.se,
            });
        }
        let best = curve
            .iter()
            .min_by(|a, b| a.lagrangian.total_cmp(&b.lagrangian))
            .expect("non-empty grid");
        offset[d] = best.offset;
        curves.push(curve);
    }
    Ok(OffsetSearch { offset, curves })
}

/// Comparison of the offset-averaged fixed-offset Lagrangian with the
/// noisy-latent objective on common samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetAverage {
    /// Per-sample average over a uniform offset grid.
    pub expected: McEstimate,
    pub noisy: McEstimate,
    /// Paired `expected - noisy`.
    pub difference: McEstimate,
    /// Smallest grid-point Lagrangian.
    pub minimum: f64,
}

/// Estimates `E_o L_o` over a midpoint grid of `grid_per_dim` values per
/// latent dimension, alongside the noisy objective on the same samples.
pub fn offset_average(
    model: &NtcModel,
    source: &SourceSpec,
    lambda: f64,
    grid_per_dim: usize,
    n: usize,
    seed: u64,
) -> Result<OffsetAverage> {
    let m = model.latent_dim();
    let x = source.sample_with(n, &mut stream_rng(seed, Stream::Eval, 0));
    let y = model.analyze(&x, lambda)?;
    let axis: Vec<f64> = (0..grid_per_dim)
        .map(|j| -0.5 + (j as f64 + 0.5) / grid_per_dim as f64)
        .collect();
    let points = grid_per_dim.pow(m as u32);
    let mut per_sample = vec![0.0; n];
    let mut minimum = f64::INFINITY;
    for p in 0..points {
        let mut idx = p;
        let offset: Vec<f64> = (0..m)
            .map(|_| {
                let o = axis[idx % grid_per_dim];
                idx /= grid_per_dim;
                o
            })
            .collect();
        let tables = model.pmf_tables(&offset)?;
        let terms = hard_samples(model, &x, &y, &offset, &tables, lambda)?;
        let mut mean = 0.0;
        for (acc, (r, d)) in per_sample.iter_mut().zip(terms) {
            let l = r + lambda * d;
            *acc += l / points as f64;
            mean += l;
        }
        minimum = minimum.min(mean / n as f64);
    }
    let noisy = noisy_samples(model, &x, &y, lambda, seed)?;
    Ok(OffsetAverage {
        expected: McEstimate::from_samples(&per_sample),
        noisy: McEstimate::from_samples(&noisy),
        difference: paired_difference(&per_sample, &noisy),
        minimum,
    })
}

/// Per-sample noisy-latent Lagrangian `-log2 p(y + u) + lambda ||x - g_s(y + u)||^2`.
pub fn noisy_samples(model: &NtcModel, x: &Tensor, y: &Tensor, lambda: f64, seed: u64) -> Result<Vec<f64>> {
    let m = model.latent_dim();
    let u = uniform_noise(&mut stream_rng(seed, Stream::Noise, 1), y.len());
    let yt: Vec<f64> = y.data().iter().zip(&u).map(|(a, b)| a + b).collect();
    let yt = Tensor::new(y.shape().to_vec(), yt)?;
    let x_hat = model.synthesize(&yt, lambda)?;
    let n = model.source_dim();
    yt.data()
        .chunks(m)
        .zip(x.data().chunks(n).zip(x_hat.data().chunks(n)))
        .map(|(v, (xr, hr))| {
            let rate = -model.density.noisy_log2_density(v)?;
            let d: f64 = xr.iter().zip(hr).map(|(a, b)| (a - b) * (a - b)).sum();
            Ok(rate + lambda * d)
        })
        .collect()
}
