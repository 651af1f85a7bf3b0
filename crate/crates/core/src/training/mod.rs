//! Training of transform codes: proxy objectives, the optimization loop for
//! single and multiple trade-offs, offset selection and operational
//! evaluation.

mod eval;
mod losses;
mod model;

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{NtcError, Result};
use crate::optim::Schedule;
use crate::quantization::{anneal_temperature, uniform_noise};
use crate::sources::{stream_rng, SourceSpec, Stream};
use crate::transforms::{ConditioningVariant, DEFAULT_KNOTS};
pub use crate::vecvq::{MetricRow, TrainReport};

pub use eval::{
    eval_operational_rd, hard_samples, noisy_samples, offset_average, select_offset_grid, CurvePoint,
    OffsetAverage, OffsetSearch, OperationMode,
};
pub use losses::{
    batch_indices, hard_terms, loss_hard, loss_noisy, loss_soft, loss_straight_through, noisy_on_tape,
    soft_on_tape, straight_through_on_tape, LossParts,
};
pub use model::{quantize_indices, Architecture, ModelVars, NtcModel, Proxy};

/// How the offset is fixed after the proxy has been minimized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetMethod {
    /// Grid search of the operational Lagrangian.
    Grid,
    /// Per-dimension mode of the latent density.
    Mode,
    /// Keep the training offset (zero).
    Keep,
}

/// Everything a training run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub source: SourceSpec,
    pub lambda: f64,
    /// Trade-off range `[min, max]` for multirate training.
    pub lambda_range: Option<[f64; 2]>,
    pub variant: ConditioningVariant,
    pub knots: usize,
    pub proxy: Proxy,
    pub arch: Architecture,
    pub schedule: Schedule,
    pub offset_method: OffsetMethod,
    pub offset_grid: usize,
    pub offset_samples: usize,
    /// Metrics are recorded every this many steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            source: SourceSpec::Laplace,
            lambda: 100.0,
            lambda_range: None,
            variant: ConditioningVariant::LayerAffine,
            knots: DEFAULT_KNOTS,
            proxy: Proxy::Noise,
            arch: Architecture::default(),
            schedule: Schedule::default(),
            offset_method: OffsetMethod::Grid,
            offset_grid: 64,
            offset_samples: 100_000,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        self.schedule.validate()?;
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(NtcError::InvalidArgument(format!("lambda {}", self.lambda)));
        }
        if let Some([lo, hi]) = self.lambda_range {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return Err(NtcError::InvalidArgument(format!("lambda range [{lo}, {hi}]")));
            }
        }
        if self.log_every == 0 || self.offset_samples == 0 {
            return Err(NtcError::InvalidArgument("log cadence and offset samples must be positive".into()));
        }
        Ok(())
    }
}

/// Scores a model on the fixed validation set.
struct Validator {
    x: Tensor,
    noise_seed: u64,
    lambdas: Vec<f64>,
    proxy: Proxy,
}

impl Validator {
    fn new(config: &TrainConfig, lambdas: Vec<f64>) -> Self {
        let seed = config.schedule.seed;
        let x = config
            .source
            .sample_with(config.schedule.validation_size, &mut stream_rng(seed, Stream::Validation, 0));
        Validator {
            x,
            noise_seed: seed ^ 0x5eed_0f_5a11,
            lambdas,
            proxy: config.proxy,
        }
    }

    /// Noisy objective for the noise proxy, hard Lagrangian at the training
    /// offset otherwise, summed over the validation trade-offs.
    fn score(&self, model: &NtcModel) -> Result<f64> {
        let mut total = 0.0;
        for &l in &self.lambdas {
            total += match self.proxy {
                Proxy::Noise => loss_noisy(model, &self.x, l, self.noise_seed)?,
                _ => loss_hard(model, &self.x, l, &model.offset)?,
            };
        }
        Ok(total)
    }
}

fn run(
    config: &TrainConfig,
    mut model: NtcModel,
    mut draw_lambda: impl FnMut(&mut rand_chacha::ChaCha12Rng) -> f64,
    validator: &Validator,
) -> Result<(NtcModel, TrainReport)> {
    let sched = &config.schedule;
    let seed = sched.seed;
    let m = model.latent_dim();
    let mut data_rng = stream_rng(seed, Stream::Data, 0);
    let mut noise_rng = stream_rng(seed, Stream::Noise, 0);
    let mut lambda_rng = stream_rng(seed, Stream::Lambda, 0);
    let mut opt = sched.optimizer();
    let lr = sched.cosine();
    let mut report = TrainReport {
        best_validation: validator.score(&model)?,
        ..Default::default()
    };
    report.validation_curve.push((0, report.best_validation));
    let mut best = model.clone();

    for step in 0..sched.steps {
        let x = config.source.sample_with(sched.batch_size, &mut data_rng);
        let u = Tensor::from_parts(
            vec![sched.batch_size, m],
            uniform_noise(&mut noise_rng, sched.batch_size * m),
        );
        let lambda = draw_lambda(&mut lambda_rng);
        let tau = anneal_temperature(step, sched.steps);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let xv = tape.constant(x);
        let parts = match config.proxy {
            Proxy::Noise => noisy_on_tape(&model, &vars, &mut tape, xv, &u, lambda)?,
            Proxy::StraightThrough => straight_through_on_tape(&model, &vars, &mut tape, xv, &u, lambda)?,
            Proxy::SoftAnnealed => soft_on_tape(&model, &vars, &mut tape, xv, &u, lambda, tau)?,
        };
        let loss = tape.value(parts.loss).item();
        if !loss.is_finite() {
            log::warn!("training diverged at step {step}; best checkpoint from step {}", report.best_step);
            return Err(NtcError::Divergence {
                step,
                detail: format!(
                    "loss {loss}; last good checkpoint at step {} with validation {}",
                    report.best_step, report.best_validation
                ),
            });
        }
        if step % config.log_every == 0 {
            report.metrics.push(MetricRow {
                step,
                loss,
                rate: tape.value(parts.rate).item(),
                distortion: tape.value(parts.distortion).item(),
                lambda,
                tau: if config.proxy == Proxy::SoftAnnealed { tau } else { 0.0 },
            });
        }
        let grads = tape.backward(parts.loss)?;
        let g: Vec<Tensor> = vars
            .all()
            .into_iter()
            .zip(model.params())
            .map(|(v, p)| grads.get_or_zeros(v, p))
            .collect();
        opt.step(&mut model.params_mut(), &g, lr.lr(step))?;

        let done = step + 1;
        if done % sched.eval_every == 0 || done == sched.steps {
            let v = validator.score(&model)?;
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

fn fix_offset(config: &TrainConfig, model: &mut NtcModel) -> Result<()> {
    model.offset = match config.offset_method {
        OffsetMethod::Grid => {
            select_offset_grid(
                model,
                &config.source,
                model.lambda,
                config.offset_grid,
                config.offset_samples,
                config.schedule.seed,
            )?
            .offset
        }
        OffsetMethod::Mode => model.density.select_offset_mode(),
        OffsetMethod::Keep => model.offset.clone(),
    };
    model.validate()
}

/// Trains a model for one trade-off: minimizes the configured proxy, keeps
/// the best validation checkpoint, then fixes the offset.
pub fn train_ntc(config: &TrainConfig) -> Result<(NtcModel, TrainReport)> {
    config.validate()?;
    let model = NtcModel::init(&config.source, &config.arch, config.proxy, config.lambda, config.schedule.seed)?;
    let lambda = config.lambda;
    let validator = Validator::new(config, vec![lambda]);
    let (mut model, report) = run(config, model, |_| lambda, &validator)?;
    fix_offset(config, &mut model)?;
    Ok((model, report))
}

/// Trades-off at which a multirate model is validated: five points evenly
/// spaced in `log lambda`.
pub fn validation_lambdas(lo: f64, hi: f64) -> Vec<f64> {
    (0..5)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / 4.0).exp())
        .collect()
}

/// Trains one model over a range of trade-offs, drawing `lambda`
/// log-uniformly per batch. The transforms are conditioned on `lambda`
/// through `config.variant`; the latent density is shared.
///
/// A range with equal endpoints trains an unconditioned model at that value.
/// The offset is fixed at the geometric middle of the range.
pub fn train_multirate(config: &TrainConfig) -> Result<(NtcModel, TrainReport)> {
    config.validate()?;
    let [lo, hi] = config
        .lambda_range
        .ok_or_else(|| NtcError::InvalidArgument("multirate training needs a lambda range".into()))?;
    if lo == hi {
        let single = TrainConfig {
            lambda: lo,
            lambda_range: None,
            ..config.clone()
        };
        return train_ntc(&single);
    }
    if hi / lo < 8.0 {
        return Err(NtcError::InvalidArgument(format!(
            "lambda range [{lo}, {hi}] spans fewer than 3 octaves"
        )));
    }
    if config.variant == ConditioningVariant::None {
        return Err(NtcError::InvalidArgument("multirate training needs a conditioning variant".into()));
    }
    let mid = (lo * hi).sqrt();
    let mut model = NtcModel::init(&config.source, &config.arch, config.proxy, mid, config.schedule.seed)?;
    model.condition(config.variant, lo, hi, config.knots)?;
    let validator = Validator::new(config, validation_lambdas(lo, hi));
    let (ln_lo, ln_hi) = (lo.ln(), hi.ln());
    let (mut model, report) = run(
        config,
        model,
        |rng| (ln_lo + (ln_hi - ln_lo) * rng.random::<f64>()).exp(),
        &validator,
    )?;
    fix_offset(config, &mut model)?;
    Ok((model, report))
}

/// Writes the per-step metrics log as CSV.
pub fn write_metrics_csv(report: &TrainReport, mut out: impl Write) -> Result<()> {
    writeln!(out, "# metrics v1")?;
    writeln!(out, "step,loss,rate,distortion,lambda,tau")?;
    for r in &report.metrics {
        writeln!(out, "{},{},{},{},{},{}", r.step, r.loss, r.rate, r.distortion, r.lambda, r.tau)?;
    }
    Ok(())
}
