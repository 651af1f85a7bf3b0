use crate::autodiff::{Tape, Tensor, Var};
use crate::entropy_model::LogisticMixtureDensity;
use crate::error::{NtcError, Result};
use crate::quantization::{check_offset, uniform_noise};
use crate::sources::{stream_rng, Stream};

use super::eval::hard_samples;
use super::model::{quantize_indices, ModelVars, NtcModel};

/// Scalar nodes of one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub loss: Var,
    pub rate: Var,
    pub distortion: Var,
}

fn check_batch(model: &NtcModel, tape: &Tape, x: Var, u: &Tensor) -> Result<usize> {
    let xs = tape.value(x).shape();
    if xs.len() != 2 || xs[0] == 0 || xs[1] != model.source_dim() {
        return Err(NtcError::dim("loss", format!("batch {xs:?}")));
    }
    if u.shape() != [xs[0], model.latent_dim()] {
        return Err(NtcError::dim("loss", format!("noise {:?}", u.shape())));
    }
    Ok(xs[0])
}

/// Mean over the batch of `-sum_i log2 p_i(v_i)`.
fn rate_term(tape: &mut Tape, vars: &ModelVars, v: Var, batch: usize) -> Result<Var> {
    let lm = LogisticMixtureDensity::log2_mass_on_tape(tape, vars.density, v)?;
    let s = tape.sum(lm)?;
    tape.scale(s, -1.0 / batch as f64)
}

/// Mean over the batch of `||x - x_hat||^2`.
fn distortion_term(tape: &mut Tape, x: Var, x_hat: Var, batch: usize) -> Result<Var> {
    let d = tape.sub(x, x_hat)?;
    let sq = tape.square(d)?;
    let s = tape.sum(sq)?;
    tape.scale(s, 1.0 / batch as f64)
}

fn combine(tape: &mut Tape, rate: Var, distortion: Var, lambda: f64) -> Result<LossParts> {
    let wd = tape.scale(distortion, lambda)?;
    let loss = tape.add(rate, wd)?;
    Ok(LossParts {
        loss,
        rate,
        distortion,
    })
}

/// Noisy-latent objective `-log2 p(y + u) + lambda ||x - g_s(y + u)||^2`.
pub fn noisy_on_tape(
    model: &NtcModel,
    vars: &ModelVars,
    tape: &mut Tape,
    x: Var,
    u: &Tensor,
    lambda: f64,
) -> Result<LossParts> {
    let b = check_batch(model, tape, x, u)?;
    let cond = model.cond(lambda);
    let y = model.g_a.forward(tape, &vars.g_a, x, cond)?;
    let uv = tape.constant(u.clone());
    let y_tilde = tape.add(y, uv)?;
    let rate = rate_term(tape, vars, y_tilde, b)?;
    let x_hat = model.g_s.forward(tape, &vars.g_s, y_tilde, cond)?;
    let dist = distortion_term(tape, x, x_hat, b)?;
    combine(tape, rate, dist, lambda)
}

/// Noisy rate with straight-through rounding at the model offset for the
/// distortion.
pub fn straight_through_on_tape(
    model: &NtcModel,
    vars: &ModelVars,
    tape: &mut Tape,
    x: Var,
    u: &Tensor,
    lambda: f64,
) -> Result<LossParts> {
    let b = check_batch(model, tape, x, u)?;
    let cond = model.cond(lambda);
    let y = model.g_a.forward(tape, &vars.g_a, x, cond)?;
    let uv = tape.constant(u.clone());
    let y_tilde = tape.add(y, uv)?;
    let rate = rate_term(tape, vars, y_tilde, b)?;
    let o = tape.constant(Tensor::vector(model.offset.clone()));
    let shifted = tape.sub(y, o)?;
    let rounded = tape.straight_through(shifted)?;
    let y_hat = tape.add(rounded, o)?;
    let x_hat = model.g_s.forward(tape, &vars.g_s, y_hat, cond)?;
    let dist = distortion_term(tape, x, x_hat, b)?;
    combine(tape, rate, dist, lambda)
}

/// Soft-rounded latents `s_tau(y + min(1, 1/tau) u)` for both terms.
pub fn soft_on_tape(
    model: &NtcModel,
    vars: &ModelVars,
    tape: &mut Tape,
    x: Var,
    u: &Tensor,
    lambda: f64,
    tau: f64,
) -> Result<LossParts> {
    let b = check_batch(model, tape, x, u)?;
    let cond = model.cond(lambda);
    let y = model.g_a.forward(tape, &vars.g_a, x, cond)?;
    let scale = (1.0 / tau).min(1.0);
    let uv = tape.constant(u.map(|v| v * scale));
    let noisy = tape.add(y, uv)?;
    let tv = tape.scalar(tau);
    let y_soft = tape.soft_round(noisy, tv)?;
    let rate = rate_term(tape, vars, y_soft, b)?;
    let x_hat = model.g_s.forward(tape, &vars.g_s, y_soft, cond)?;
    let dist = distortion_term(tape, x, x_hat, b)?;
    combine(tape, rate, dist, lambda)
}

fn noise_for(batch: &Tensor, m: usize, seed: u64) -> Tensor {
    let b = batch.rows();
    Tensor::from_parts(vec![b, m], uniform_noise(&mut stream_rng(seed, Stream::Noise, 0), b * m))
}

fn value_of(
    model: &NtcModel,
    batch: &Tensor,
    f: impl FnOnce(&NtcModel, &ModelVars, &mut Tape, Var) -> Result<LossParts>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let x = tape.constant(batch.clone());
    let parts = f(model, &vars, &mut tape, x)?;
    let v = tape.value(parts.loss).item();
    if !v.is_finite() {
        return Err(NtcError::NonFinite {
            context: "loss value".into(),
        });
    }
    Ok(v)
}

/// Noisy-latent objective with noise drawn from `noise_seed`.
pub fn loss_noisy(model: &NtcModel, batch: &Tensor, lambda: f64, noise_seed: u64) -> Result<f64> {
    let u = noise_for(batch, model.latent_dim(), noise_seed);
    value_of(model, batch, |m, v, t, x| noisy_on_tape(m, v, t, x, &u, lambda))
}

pub fn loss_straight_through(model: &NtcModel, batch: &Tensor, lambda: f64, noise_seed: u64) -> Result<f64> {
    let u = noise_for(batch, model.latent_dim(), noise_seed);
    value_of(model, batch, |m, v, t, x| straight_through_on_tape(m, v, t, x, &u, lambda))
}

pub fn loss_soft(model: &NtcModel, batch: &Tensor, lambda: f64, tau: f64, noise_seed: u64) -> Result<f64> {
    let u = noise_for(batch, model.latent_dim(), noise_seed);
    value_of(model, batch, |m, v, t, x| soft_on_tape(m, v, t, x, &u, lambda, tau))
}

/// Per-sample `(rate, distortion)` of hard quantization at offset `o`, with
/// the rate taken from the discrete tables `P(k; o)`.
pub fn hard_terms(model: &NtcModel, batch: &Tensor, lambda: f64, offset: &[f64]) -> Result<Vec<(f64, f64)>> {
    check_offset(offset)?;
    let m = model.latent_dim();
    if offset.len() != m {
        return Err(NtcError::dim("loss_hard", "offset length"));
    }
    let tables = model.pmf_tables(offset)?;
    let y = model.analyze(batch, lambda)?;
    hard_samples(model, batch, &y, offset, &tables, lambda)
}

/// Mean operational Lagrangian at a fixed offset (evaluation only).
pub fn loss_hard(model: &NtcModel, batch: &Tensor, lambda: f64, offset: &[f64]) -> Result<f64> {
    let terms = hard_terms(model, batch, lambda, offset)?;
    Ok(terms.iter().map(|(r, d)| r + lambda * d).sum::<f64>() / terms.len() as f64)
}

/// Latent indices a batch maps to at `offset`, exposed for diagnostics.
pub fn batch_indices(model: &NtcModel, batch: &Tensor, lambda: f64, offset: &[f64]) -> Result<Vec<i64>> {
    let y = model.analyze(batch, lambda)?;
    Ok(quantize_indices(&y, offset))
}
