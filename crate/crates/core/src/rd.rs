//! Rate-distortion points and Monte-Carlo evaluation helpers.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::sources::{stream_rng, SourceSpec, Stream};
use crate::stats::Accumulator;

/// One operating point: rate in bits and squared error per source vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub rate: f64,
    pub distortion: f64,
    pub lambda: f64,
    pub label: String,
    /// Standard error of the per-sample Lagrangian (0 for exact values).
    pub lagrangian_se: f64,
    pub rate_se: f64,
    pub distortion_se: f64,
    /// Number of Monte-Carlo samples (0 for exact values).
    pub samples: usize,
}

impl RdPoint {
    pub fn exact(rate: f64, distortion: f64, lambda: f64, label: impl Into<String>) -> Self {
        RdPoint {
            rate,
            distortion,
            lambda,
            label: label.into(),
            lagrangian_se: 0.0,
            rate_se: 0.0,
            distortion_se: 0.0,
            samples: 0,
        }
    }

    pub fn lagrangian(&self) -> f64 {
        self.rate + self.lambda * self.distortion
    }
}

/// Per-sample rate/distortion accumulator producing an [`RdPoint`].
#[derive(Clone, Debug, Default)]
pub struct RdAccumulator {
    rate: Accumulator,
    dist: Accumulator,
    lag: Accumulator,
    lambda: f64,
}

impl RdAccumulator {
    pub fn new(lambda: f64) -> Self {
        RdAccumulator {
            lambda,
            ..Default::default()
        }
    }

    pub fn push(&mut self, rate: f64, distortion: f64) {
        self.rate.push(rate);
        self.dist.push(distortion);
        self.lag.push(rate + self.lambda * distortion);
    }

    pub fn len(&self) -> usize {
        self.rate.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rate.is_empty()
    }

    pub fn finish(&self, label: impl Into<String>) -> RdPoint {
        let (r, d, l) = (self.rate.finish(), self.dist.finish(), self.lag.finish());
        RdPoint {
            rate: r.mean,
            distortion: d.mean,
            lambda: self.lambda,
            label: label.into(),
            lagrangian_se: l.se,
            rate_se: r.se,
            distortion_se: d.se,
            samples: r.n,
        }
    }
}

/// Samples per independently seeded evaluation chunk.
pub const EVAL_CHUNK: usize = 1 << 16;

/// Calls `f` on consecutive chunks of `n` fresh samples. Chunk `i` is drawn
/// from its own stream, so results do not depend on how chunks are scheduled.
pub fn for_each_eval_chunk(
    source: &SourceSpec,
    n: usize,
    seed: u64,
    stream: Stream,
    mut f: impl FnMut(&Tensor) -> crate::Result<()>,
) -> crate::Result<()> {
    let mut done = 0;
    let mut idx = 0u32;
    while done < n {
        let m = EVAL_CHUNK.min(n - done);
        let x = source.sample_with(m, &mut stream_rng(seed, stream, idx));
        f(&x)?;
        done += m;
        idx += 1;
    }
    Ok(())
}

/// Keeps the points not dominated in both rate and distortion, sorted by
/// increasing rate (distortion then strictly decreases).
pub fn pareto_front(points: &[RdPoint]) -> Vec<RdPoint> {
    let mut sorted: Vec<RdPoint> = points.to_vec();
    sorted.sort_by(|a, b| a.rate.total_cmp(&b.rate).then(a.distortion.total_cmp(&b.distortion)));
    let mut out: Vec<RdPoint> = Vec::new();
    for p in sorted {
        if out.last().is_none_or(|q| p.distortion < q.distortion) {
            out.push(p);
        }
    }
    out
}
