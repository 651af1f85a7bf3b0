//! Entropy-constrained vector quantization trained by stochastic gradient
//! descent on the rate-distortion Lagrangian.

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_raw, Tape, Tensor};
use crate::error::{NtcError, Result};
use crate::optim::Schedule;
use crate::rd::{for_each_eval_chunk, RdAccumulator, RdPoint};
use crate::serialize::{self, ModelKind};
use crate::sources::{stream_rng, SourceSpec, Stream};

/// Codebook `c_k`, prior logits `a_k` and the trade-off `lambda`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqModel {
    /// `[K x N]`
    pub codebook: Tensor,
    /// `[K]`
    pub logits: Tensor,
    pub lambda: f64,
}

/// Softmax of `logits` with max subtraction.
pub fn prior_pmf(logits: &Tensor) -> Tensor {
    let ls = log_softmax_raw(logits.data());
    Tensor::vector(ls.into_iter().map(f64::exp).collect())
}

impl VqModel {
    pub fn new(codebook: Tensor, logits: Tensor, lambda: f64) -> Result<Self> {
        let m = VqModel {
            codebook,
            logits,
            lambda,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebook.shape().len() != 2 || self.codebook.shape()[0] == 0 {
            return Err(NtcError::dim("VqModel", format!("codebook {:?}", self.codebook.shape())));
        }
        if self.logits.shape() != [self.codebook.shape()[0]] {
            return Err(NtcError::dim(
                "VqModel",
                format!("logits {:?} for {} codevectors", self.logits.shape(), self.k()),
            ));
        }
        if !(self.lambda >= 0.0) {
            return Err(NtcError::InvalidArgument(format!("lambda {}", self.lambda)));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.codebook.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.codebook.shape()[1]
    }

    /// `log2 P(k)` for every index.
    pub fn log2_prior(&self) -> Vec<f64> {
        log_softmax_raw(self.logits.data())
            .into_iter()
            .map(|v| v / std::f64::consts::LN_2)
            .collect()
    }

    fn sq_dist(&self, k: usize, x: &[f64]) -> f64 {
        self.codebook
            .row(k)
            .iter()
            .zip(x)
            .map(|(c, v)| (v - c) * (v - c))
            .sum()
    }

    /// `-log2 P(k) + lambda * ||x - c_k||^2`.
    pub fn sample_loss(&self, k: usize, x: &[f64]) -> Result<f64> {
        if k >= self.k() {
            return Err(NtcError::IndexOutOfRange { index: k, len: self.k() });
        }
        if x.len() != self.dim() {
            return Err(NtcError::dim("sample_loss", "vector length"));
        }
        Ok(-self.log2_prior()[k] + self.lambda * self.sq_dist(k, x))
    }

    fn encode_with(&self, neg_log2: &[f64], x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_loss = f64::INFINITY;
        for (k, r) in neg_log2.iter().enumerate() {
            let l = r + self.lambda * self.sq_dist(k, x);
            if l < best_loss {
                best_loss = l;
                best = k;
            }
        }
        best
    }

    /// Index minimizing the sample loss; ties go to the lowest index.
    pub fn encode(&self, x: &[f64]) -> usize {
        let r: Vec<f64> = self.log2_prior().iter().map(|v| -v).collect();
        self.encode_with(&r, x)
    }

    pub fn encode_batch(&self, x: &Tensor) -> Vec<usize> {
        let r: Vec<f64> = self.log2_prior().iter().map(|v| -v).collect();
        x.data().chunks(self.dim()).map(|row| self.encode_with(&r, row)).collect()
    }

    /// Mean Lagrangian of a batch under hard encoding.
    pub fn batch_lagrangian(&self, x: &Tensor) -> f64 {
        let r: Vec<f64> = self.log2_prior().iter().map(|v| -v).collect();
        let n = x.rows();
        x.data()
            .chunks(self.dim())
            .map(|row| {
                let k = self.encode_with(&r, row);
                r[k] + self.lambda * self.sq_dist(k, row)
            })
            .sum::<f64>()
            / n as f64
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        serialize::to_bytes(ModelKind::Vq, self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let m: VqModel = serialize::from_bytes(ModelKind::Vq, bytes)?;
        m.validate()?;
        Ok(m)
    }
}

/// Summary of a training run.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub best_step: usize,
    pub best_validation: f64,
    /// `(step, validation Lagrangian)` at each evaluation.
    pub validation_curve: Vec<(usize, f64)>,
    /// `(step, loss, rate, distortion)` per logged step.
    pub metrics: Vec<MetricRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub rate: f64,
    pub distortion: f64,
    pub lambda: f64,
    pub tau: f64,
}

/// Codebook size used when none is given: 256 for scalar sources, 1024
/// otherwise.
pub fn default_codebook_size(source: &SourceSpec) -> usize {
    if source.dim() == 1 {
        256
    } else {
        1024
    }
}

/// Minimizes the expected sample loss over codevectors and prior logits.
///
/// Codevectors start at distinct source draws and logits at zero. Each step
/// encodes a fresh batch and follows the gradient of the selected sample
/// losses; the parameters with the best held-out Lagrangian are returned.
pub fn train_vecvq(
    source: &SourceSpec,
    lambda: f64,
    k: usize,
    schedule: &Schedule,
) -> Result<(VqModel, TrainReport)> {
    source.validate()?;
    schedule.validate()?;
    if k == 0 {
        return Err(NtcError::InvalidArgument("codebook size must be at least 1".into()));
    }
    if !(lambda >= 0.0) {
        return Err(NtcError::InvalidArgument(format!("lambda {lambda}")));
    }
    let n = source.dim();
    let seed = schedule.seed;
    let mut init_rng = stream_rng(seed, Stream::Init, 0);
    let pool_size = (4 * k).max(1000);
    let pool = source.sample_with(pool_size, &mut init_rng);
    let picks = sample_indices(&mut init_rng, pool_size, k);
    let mut cb = Vec::with_capacity(k * n);
    for i in picks.iter() {
        cb.extend_from_slice(pool.row(i));
    }
    let mut model = VqModel::new(Tensor::new(vec![k, n], cb)?, Tensor::zeros(&[k]), lambda)?;

    let validation = source.sample_with(schedule.validation_size, &mut stream_rng(seed, Stream::Validation, 0));
    let mut data_rng = stream_rng(seed, Stream::Data, 0);
    let mut opt = schedule.optimizer();
    let lr = schedule.cosine();
    let mut report = TrainReport {
        best_validation: model.batch_lagrangian(&validation),
        ..Default::default()
    };
    report.validation_curve.push((0, report.best_validation));
    let mut best = model.clone();
    let ln2 = std::f64::consts::LN_2;

    for step in 0..schedule.steps {
        let x = source.sample_with(schedule.batch_size, &mut data_rng);
        let idx = model.encode_batch(&x);
        let mut tape = Tape::new();
        let cbv = tape.param(model.codebook.clone());
        let lgv = tape.param(model.logits.clone());
        let xv = tape.constant(x);
        let ls = tape.log_softmax(lgv)?;
        let sel = tape.gather(ls, &idx)?;
        let mean_ln = tape.mean(sel)?;
        let rate = tape.scale(mean_ln, -1.0 / ln2)?;
        let c = tape.gather_rows(cbv, &idx)?;
        let diff = tape.sub(xv, c)?;
        let sq = tape.square(diff)?;
        let per = tape.sum_last_axis(sq)?;
        let dist = tape.mean(per)?;
        let wd = tape.scale(dist, lambda)?;
        let loss = tape.add(rate, wd)?;
        let loss_v = tape.value(loss).item();
        if !loss_v.is_finite() {
            return Err(NtcError::Divergence {
                step,
                detail: format!("loss {loss_v}"),
            });
        }
        if step % 100 == 0 {
            report.metrics.push(MetricRow {
                step,
                loss: loss_v,
                rate: tape.value(rate).item(),
                distortion: tape.value(dist).item(),
                lambda,
                tau: 0.0,
            });
        }
        let grads = tape.backward(loss)?;
        let g = [
            grads.get_or_zeros(cbv, &model.codebook),
            grads.get_or_zeros(lgv, &model.logits),
        ];
        opt.step(&mut [&mut model.codebook, &mut model.logits], &g, lr.lr(step))?;

        let done = step + 1;
        if done % schedule.eval_every == 0 || done == schedule.steps {
            let v = model.batch_lagrangian(&validation);
            report.validation_curve.push((done, v));
            if v < report.best_validation {
                report.best_validation = v;
                report.best_step = done;
                best = model.clone();
            }
        }
    }
    Ok((best, report))
}

/// Monte-Carlo `KL(M || P)` in bits between the empirical distribution `M`
/// of encoder outputs over `n` fresh samples and the model prior `P`.
pub fn kl_to_marginal(model: &VqModel, source: &SourceSpec, n: usize, seed: u64) -> Result<f64> {
    let counts = index_histogram(model, source, n, seed)?;
    let log2p = model.log2_prior();
    let total = n as f64;
    Ok(counts
        .iter()
        .zip(&log2p)
        .filter(|(&c, _)| c > 0)
        .map(|(&c, &lp)| {
            let m = c as f64 / total;
            m * (m.log2() - lp)
        })
        .sum())
}

/// Encoder-output counts over `n` fresh samples.
pub fn index_histogram(model: &VqModel, source: &SourceSpec, n: usize, seed: u64) -> Result<Vec<usize>> {
    if source.dim() != model.dim() {
        return Err(NtcError::dim("index_histogram", "source/model dimension"));
    }
    let mut counts = vec![0usize; model.k()];
    for_each_eval_chunk(source, n, seed, Stream::Eval, |x| {
        for k in model.encode_batch(x) {
            counts[k] += 1;
        }
        Ok(())
    })?;
    Ok(counts)
}

/// Operational rate and distortion on `n` fresh samples.
pub fn eval_rd(model: &VqModel, source: &SourceSpec, n: usize, seed: u64) -> Result<RdPoint> {
    if source.dim() != model.dim() {
        return Err(NtcError::dim("eval_rd", "source/model dimension"));
    }
    let neg: Vec<f64> = model.log2_prior().iter().map(|v| -v).collect();
    let mut acc = RdAccumulator::new(model.lambda);
    for_each_eval_chunk(source, n, seed, Stream::Eval, |x| {
        for row in x.data().chunks(model.dim()) {
            let k = model.encode_with(&neg, row);
            // a single symbol costs nothing
            let rate = if model.k() == 1 { 0.0 } else { neg[k] };
            acc.push(rate, model.sq_dist(k, row));
        }
        Ok(())
    })?;
    Ok(acc.finish("vecvq"))
}
