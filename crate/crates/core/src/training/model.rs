use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::entropy_model::{DensityVars, LogisticMixtureDensity, PmfTable, DEFAULT_COMPONENTS};
use crate::error::{NtcError, Result};
use crate::quantization::check_offset;
use crate::serialize::{self, ModelKind};
use crate::sources::{stream_rng, SourceSpec, Stream};
use crate::transforms::{make_ltc, ConditioningVariant, MlpTransform, MlpVars, Nonlinearity, TransformRole};

/// Differentiable stand-in for quantization used during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proxy {
    /// Additive uniform noise for both rate and distortion.
    Noise,
    /// Noisy rate, straight-through rounding for distortion.
    StraightThrough,
    /// Annealed soft rounding of slightly noisy latents.
    SoftAnnealed,
}

impl Proxy {
    pub fn name(self) -> &'static str {
        match self {
            Proxy::Noise => "noise",
            Proxy::StraightThrough => "straight_through",
            Proxy::SoftAnnealed => "soft_annealed",
        }
    }
}

/// Transform architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    /// Single affine layers instead of four-layer networks.
    pub linear: bool,
    pub hidden: usize,
    pub nonlinearity: Nonlinearity,
    /// Latent dimension; the source dimension when absent.
    pub latent_dim: Option<usize>,
    pub components: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            linear: false,
            hidden: 100,
            nonlinearity: Nonlinearity::Softplus,
            latent_dim: None,
            components: DEFAULT_COMPONENTS,
        }
    }
}

/// A transform code: analysis transform, synthesis transform, latent
/// density and quantization offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NtcModel {
    pub g_a: MlpTransform,
    pub g_s: MlpTransform,
    pub density: LogisticMixtureDensity,
    /// Quantization offset, one entry per latent dimension, in `[-1/2, 1/2)`.
    pub offset: Vec<f64>,
    pub proxy: Proxy,
    /// Trade-off the model operates at (the conditioning input when the
    /// transforms depend on it).
    pub lambda: f64,
}

/// Tape handles of all model parameters.
pub struct ModelVars {
    pub g_a: MlpVars,
    pub g_s: MlpVars,
    pub density: DensityVars,
}

impl ModelVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.g_a.all().to_vec();
        v.extend_from_slice(self.g_s.all());
        v.extend([self.density.logits, self.density.loc, self.density.log_scale]);
        v
    }
}

impl NtcModel {
    /// Freshly initialized model for `source`.
    pub fn init(source: &SourceSpec, arch: &Architecture, proxy: Proxy, lambda: f64, seed: u64) -> Result<Self> {
        let n = source.dim();
        let m = arch.latent_dim.unwrap_or(n);
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let (g_a, g_s) = if arch.linear {
            if m != n {
                return Err(NtcError::InvalidArgument("linear transforms keep the dimension".into()));
            }
            (make_ltc(n)?, make_ltc(n)?)
        } else {
            (
                MlpTransform::four_layer(n, arch.hidden, m, arch.nonlinearity, &mut rng)?,
                MlpTransform::four_layer(m, arch.hidden, n, arch.nonlinearity, &mut rng)?,
            )
        };
        let model = NtcModel {
            g_a,
            g_s,
            density: LogisticMixtureDensity::new(m, arch.components)?,
            offset: vec![0.0; m],
            proxy,
            lambda,
        };
        model.validate()?;
        Ok(model)
    }

    /// Makes both transforms depend on `lambda` through `variant`.
    pub fn condition(&mut self, variant: ConditioningVariant, lambda_min: f64, lambda_max: f64, knots: usize) -> Result<()> {
        self.g_a
            .attach_conditioning(variant, TransformRole::Analysis, lambda_min, lambda_max, knots)?;
        self.g_s
            .attach_conditioning(variant, TransformRole::Synthesis, lambda_min, lambda_max, knots)
    }

    pub fn validate(&self) -> Result<()> {
        self.g_a.validate()?;
        self.g_s.validate()?;
        let m = self.latent_dim();
        if self.g_s.in_dim() != m || self.density.dim() != m || self.offset.len() != m {
            return Err(NtcError::dim("NtcModel", "latent dimensions disagree"));
        }
        if self.g_s.out_dim() != self.g_a.in_dim() {
            return Err(NtcError::dim("NtcModel", "source dimensions disagree"));
        }
        check_offset(&self.offset)?;
        if !(self.lambda > 0.0) {
            return Err(NtcError::InvalidArgument(format!("lambda {}", self.lambda)));
        }
        Ok(())
    }

    pub fn source_dim(&self) -> usize {
        self.g_a.in_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.g_a.out_dim()
    }

    pub fn variant(&self) -> ConditioningVariant {
        self.g_a.variant()
    }

    pub fn is_conditioned(&self) -> bool {
        self.variant() != ConditioningVariant::None
    }

    /// The conditioning input at trade-off `lambda` (`None` for fixed-rate
    /// models).
    pub fn cond(&self, lambda: f64) -> Option<f64> {
        if self.is_conditioned() {
            Some(lambda)
        } else {
            None
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.g_a.params();
        p.extend(self.g_s.params());
        p.extend(self.density.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.g_a.params_mut();
        p.extend(self.g_s.params_mut());
        p.extend(self.density.params_mut());
        p
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        ModelVars {
            g_a: self.g_a.bind(tape, trainable),
            g_s: self.g_s.bind(tape, trainable),
            density: self.density.bind(tape, trainable),
        }
    }

    /// Latents `g_a(x)` of a `[B x N]` batch.
    pub fn analyze(&self, x: &Tensor, lambda: f64) -> Result<Tensor> {
        self.g_a.apply(x, self.cond(lambda))
    }

    /// Reconstructions `g_s(y)` of a `[B x M]` batch.
    pub fn synthesize(&self, y: &Tensor, lambda: f64) -> Result<Tensor> {
        self.g_s.apply(y, self.cond(lambda))
    }

    /// Quantization indices `round(g_a(x) - o)`, row-major `[B x M]`.
    pub fn encode_indices(&self, x: &Tensor, offset: &[f64], lambda: f64) -> Result<Vec<i64>> {
        let y = self.analyze(x, lambda)?;
        Ok(quantize_indices(&y, offset))
    }

    /// Reconstructions `g_s(k + o)` for row-major indices `k`.
    pub fn decode_indices(&self, k: &[i64], offset: &[f64], lambda: f64) -> Result<Tensor> {
        let m = self.latent_dim();
        if k.len() % m != 0 || offset.len() != m {
            return Err(NtcError::dim("decode_indices", "index/offset length"));
        }
        let data: Vec<f64> = k
            .iter()
            .enumerate()
            .map(|(i, &v)| v as f64 + offset[i % m])
            .collect();
        self.synthesize(&Tensor::new(vec![k.len() / m, m], data)?, lambda)
    }

    /// PMF tables at `offset`.
    pub fn pmf_tables(&self, offset: &[f64]) -> Result<Vec<PmfTable>> {
        self.density.discrete_pmf(offset)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        serialize::to_bytes(ModelKind::Ntc, self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let m: NtcModel = serialize::from_bytes(ModelKind::Ntc, bytes)?;
        m.validate()?;
        Ok(m)
    }
}

/// `round(y - o)` per entry.
pub fn quantize_indices(y: &Tensor, offset: &[f64]) -> Vec<i64> {
    let m = offset.len();
    y.data()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - offset[i % m]).round_ties_even() as i64)
        .collect()
}
