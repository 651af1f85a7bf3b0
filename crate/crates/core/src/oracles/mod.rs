//! Reference results: the best entropy-constrained scalar quantizer for the
//! Laplace source, the rate-distortion function via Blahut-Arimoto, and a
//! Monte-Carlo evaluator for explicit quantizer descriptions.

mod blahut_arimoto;
mod evaluate;
mod sullivan;

use serde::{Deserialize, Serialize};

use crate::error::{NtcError, Result};

pub use crate::rd::RdPoint;
pub use blahut_arimoto::{
    blahut_arimoto, blahut_arimoto_sweep, interpolate_rate_at, BaConfig, BaGrid, BaResult,
};
pub use evaluate::{evaluate_quantizer, QuantizerEvaluation};
pub use sullivan::{
    laplace_family_rd, sullivan_ecsq, sullivan_quantizer, SullivanFamily, SullivanResult,
};

/// Transform-independent description of a quantizer: how space is split into
/// cells, the reconstruction of each cell and the probability used to code it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum QuantizerDescription {
    /// The real line split at `boundaries` into `boundaries.len() + 1`
    /// intervals; interval `i` belongs to cell `interval_cells[i]`. A cell may
    /// own several disjoint intervals.
    OneD {
        boundaries: Vec<f64>,
        interval_cells: Vec<usize>,
        codevectors: Vec<f64>,
        pmf: Vec<f64>,
        /// Integer symbol coded for each cell, when it comes from a lattice.
        symbols: Option<Vec<i64>>,
    },
    /// A rectangle `[x0, x1] x [y0, y1]` rasterized at `nx x ny` pixels, each
    /// labeled with a cell; `codevectors` is `[cells x 2]` row-major.
    TwoD {
        bounds: [f64; 4],
        nx: usize,
        ny: usize,
        labels: Vec<usize>,
        codevectors: Vec<f64>,
        pmf: Vec<f64>,
        /// Cells covering fewer than 4 pixels.
        small_cells: usize,
    },
}

impl QuantizerDescription {
    /// Contiguous one-dimensional quantizer: interval `i` is cell `i`.
    pub fn one_d(boundaries: Vec<f64>, codevectors: Vec<f64>, pmf: Vec<f64>) -> Result<Self> {
        let cells = (0..codevectors.len()).collect();
        let d = QuantizerDescription::OneD {
            boundaries,
            interval_cells: cells,
            codevectors,
            pmf,
            symbols: None,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn dim(&self) -> usize {
        match self {
            QuantizerDescription::OneD { .. } => 1,
            QuantizerDescription::TwoD { .. } => 2,
        }
    }

    pub fn cell_count(&self) -> usize {
        self.pmf().len()
    }

    pub fn pmf(&self) -> &[f64] {
        match self {
            QuantizerDescription::OneD { pmf, .. } | QuantizerDescription::TwoD { pmf, .. } => pmf,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pmf = self.pmf();
        if pmf.iter().any(|p| !(*p > 0.0 && *p <= 1.0)) {
            return Err(NtcError::InvalidArgument("cell probabilities must lie in (0, 1]".into()));
        }
        // Cells of an extracted quantizer may miss symbols the model can
        // code, so the total may fall short of 1 but never exceed it.
        if pmf.iter().sum::<f64>() > 1.0 + 1e-9 {
            return Err(NtcError::InvalidArgument("cell probabilities sum above 1".into()));
        }
        match self {
            QuantizerDescription::OneD {
                boundaries,
                interval_cells,
                codevectors,
                pmf,
                symbols,
            } => {
                if boundaries.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(NtcError::InvalidArgument("boundaries must increase strictly".into()));
                }
                if interval_cells.len() != boundaries.len() + 1 {
                    return Err(NtcError::dim("QuantizerDescription", "one cell per interval"));
                }
                if codevectors.len() != pmf.len() || interval_cells.iter().any(|&c| c >= pmf.len()) {
                    return Err(NtcError::dim("QuantizerDescription", "one codevector per cell"));
                }
                if symbols.as_ref().is_some_and(|s| s.len() != pmf.len()) {
                    return Err(NtcError::dim("QuantizerDescription", "one symbol per cell"));
                }
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
                if !(bounds[1] > bounds[0] && bounds[3] > bounds[2]) || *nx == 0 || *ny == 0 {
                    return Err(NtcError::InvalidArgument("empty rasterization bounds".into()));
                }
                if labels.len() != nx * ny || codevectors.len() != 2 * pmf.len() {
                    return Err(NtcError::dim("QuantizerDescription", "label grid or codevectors"));
                }
                if labels.iter().any(|&l| l >= pmf.len()) {
                    return Err(NtcError::dim("QuantizerDescription", "label out of range"));
                }
            }
        }
        Ok(())
    }

    /// Cell containing the scalar `x` (one-dimensional descriptions).
    pub fn cell_of_scalar(&self, x: f64) -> Option<usize> {
        match self {
            QuantizerDescription::OneD {
                boundaries,
                interval_cells,
                ..
            } => Some(interval_cells[boundaries.partition_point(|&b| b <= x)]),
            _ => None,
        }
    }
}
