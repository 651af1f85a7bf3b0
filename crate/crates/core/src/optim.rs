//! Adaptive-moment optimizer and learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{NtcError, Result};

/// Cosine decay from `start` to `end` over `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub start: f64,
    pub end: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(start: f64, end: f64, total_steps: usize) -> Self {
        CosineSchedule {
            start,
            end,
            total_steps,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.end;
        }
        let p = (step as f64 / self.total_steps as f64).min(1.0);
        self.end + (self.start - self.end) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the full gradient when its global norm exceeds this.
    pub clip_norm: Option<f64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }
}

impl Adam {
    pub fn with_clip(mut self, clip: f64) -> Self {
        self.clip_norm = Some(clip);
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update of every parameter with the matching gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(NtcError::dim(
                "Adam::step",
                format!("{} parameters, {} gradients", params.len(), grads.len()),
            ));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(NtcError::dim("Adam::step", "parameter count changed"));
        }
        let mut scale = 1.0;
        if let Some(clip) = self.clip_norm {
            let norm = grads
                .iter()
                .flat_map(|g| g.data())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                scale = clip / norm;
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(NtcError::dim("Adam::step", format!("parameter {i} size changed")));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gr)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gr = gr * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gr;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gr * gr;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        let s = CosineSchedule::new(1e-3, 1e-5, 100);
        assert!((s.lr(0) - 1e-3).abs() < 1e-15);
        assert!((s.lr(100) - 1e-5).abs() < 1e-15);
        assert!((s.lr(50) - (1e-5 + 0.5 * (1e-3 - 1e-5))).abs() < 1e-15);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = Tensor::vector(vec![3.0, -2.0]);
        let mut opt = Adam::default();
        for _ in 0..3000 {
            let g = x.map(|v| 2.0 * (v - 1.0));
            opt.step(&mut [&mut x], &[g], 1e-2).unwrap();
        }
        assert!(x.data().iter().all(|v| (v - 1.0).abs() < 1e-3));
    }

    #[test]
    fn first_step_has_learning_rate_magnitude() {
        let mut x = Tensor::vector(vec![0.0]);
        let mut opt = Adam::default();
        opt.step(&mut [&mut x], &[Tensor::vector(vec![123.0])], 0.1).unwrap();
        assert!((x.item() + 0.1).abs() < 1e-6);
    }
}

/// Step budget and optimizer settings shared by every training loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Validation cadence in steps.
    pub eval_every: usize,
    pub validation_size: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            steps: 150_000,
            batch_size: 512,
            lr_start: 1e-3,
            lr_end: 1e-5,
            eval_every: 1000,
            validation_size: 10_000,
            clip_norm: None,
            seed: 0,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 || self.validation_size == 0 {
            return Err(NtcError::InvalidArgument(
                "batch size, eval cadence and validation size must be positive".into(),
            ));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return Err(NtcError::InvalidArgument("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn cosine(&self) -> CosineSchedule {
        CosineSchedule::new(self.lr_start, self.lr_end, self.steps)
    }

    pub fn optimizer(&self) -> Adam {
        let opt = Adam::default();
        match self.clip_norm {
            Some(c) => opt.with_clip(c),
            None => opt,
        }
    }
}
