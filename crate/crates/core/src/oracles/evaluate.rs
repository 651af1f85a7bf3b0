use serde::{Deserialize, Serialize};

use super::{QuantizerDescription, RdPoint};
use crate::error::{NtcError, Result};
use crate::rd::{for_each_eval_chunk, RdAccumulator};
use crate::sources::{SourceSpec, Stream};

/// Fraction of samples outside a rasterized quantizer that triggers a warning.
const OUT_OF_GRID_WARN: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerEvaluation {
    pub point: RdPoint,
    /// Samples outside the rasterized region, assigned to the nearest pixel.
    pub out_of_grid: usize,
    /// Fraction of samples landing on a pixel adjacent to a label change.
    pub boundary_fraction: f64,
}

/// Monte-Carlo rate (`-log2` of the cell probability) and squared error of an
/// explicit quantizer on `n` fresh source samples.
pub fn evaluate_quantizer(
    desc: &QuantizerDescription,
    source: &SourceSpec,
    lambda: f64,
    n: usize,
    seed: u64,
) -> Result<QuantizerEvaluation> {
    desc.validate()?;
    if desc.dim() != source.dim() {
        return Err(NtcError::dim("evaluate_quantizer", "source/quantizer dimension"));
    }
    let mut acc = RdAccumulator::new(lambda);
    let mut out_of_grid = 0usize;
    let mut on_boundary = 0usize;
    match desc {
        QuantizerDescription::OneD {
            codevectors, pmf, ..
        } => {
            let neg: Vec<f64> = pmf.iter().map(|p| -p.log2()).collect();
            let single = pmf.len() == 1;
            for_each_eval_chunk(source, n, seed, Stream::Eval, |x| {
                for &v in x.data() {
                    let c = desc.cell_of_scalar(v).expect("one-dimensional");
                    let e = v - codevectors[c];
                    acc.push(if single { 0.0 } else { neg[c] }, e * e);
                }
                Ok(())
            })?;
        }
        QuantizerDescription::TwoD {
            bounds,
            nx,
            ny,
            labels,
            codevectors,
            pmf,
            ..
        } => {
            let neg: Vec<f64> = pmf.iter().map(|p| -p.log2()).collect();
            let single = pmf.len() == 1;
            let (nx, ny) = (*nx, *ny);
            let wx = (bounds[1] - bounds[0]) / nx as f64;
            let wy = (bounds[3] - bounds[2]) / ny as f64;
            let label_at = |i: usize, j: usize| labels[j * nx + i];
            for_each_eval_chunk(source, n, seed, Stream::Eval, |x| {
                for p in x.data().chunks(2) {
                    let fi = ((p[0] - bounds[0]) / wx).floor();
                    let fj = ((p[1] - bounds[2]) / wy).floor();
                    if fi < 0.0 || fj < 0.0 || fi >= nx as f64 || fj >= ny as f64 {
                        out_of_grid += 1;
                    }
                    let i = fi.clamp(0.0, (nx - 1) as f64) as usize;
                    let j = fj.clamp(0.0, (ny - 1) as f64) as usize;
                    let c = label_at(i, j);
                    let near_change = (i > 0 && label_at(i - 1, j) != c)
                        || (i + 1 < nx && label_at(i + 1, j) != c)
                        || (j > 0 && label_at(i, j - 1) != c)
                        || (j + 1 < ny && label_at(i, j + 1) != c);
                    if near_change {
                        on_boundary += 1;
                    }
                    let (e0, e1) = (p[0] - codevectors[2 * c], p[1] - codevectors[2 * c + 1]);
                    acc.push(if single { 0.0 } else { neg[c] }, e0 * e0 + e1 * e1);
                }
                Ok(())
            })?;
            if out_of_grid as f64 > OUT_OF_GRID_WARN * n as f64 {
                log::warn!("{out_of_grid} of {n} samples fell outside the rasterized quantizer");
            }
        }
    }
    Ok(QuantizerEvaluation {
        point: acc.finish("quantizer"),
        out_of_grid,
        boundary_fraction: on_boundary as f64 / n as f64,
    })
}
