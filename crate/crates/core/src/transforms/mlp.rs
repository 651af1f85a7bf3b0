use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{NtcError, Result};

use super::spline::LambdaSpline;

/// Floor applied to raw GDN offsets before squaring, so `beta >= 1e-6`.
pub const GDN_BETA_FLOOR: f64 = 1e-3;

/// Rows pushed through one evaluation tape at a time.
const EVAL_CHUNK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Softplus,
    Gdn,
    None,
}

/// Layer nonlinearity; GDN carries its own unconstrained parameters, mapped
/// to `beta = max(b, 1e-3)^2` and `gamma = max(g, 0)^2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Softplus,
    Gdn { beta_raw: Tensor, gamma_raw: Tensor },
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `[out x in]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// How a transform depends on the rate-distortion trade-off `lambda`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningVariant {
    None,
    LatentScaling,
    LatentAffine,
    LayerScaling,
    LayerAffine,
    GdnParams,
}

impl ConditioningVariant {
    pub fn all() -> [ConditioningVariant; 6] {
        use ConditioningVariant::*;
        [None, LatentScaling, LatentAffine, LayerScaling, LayerAffine, GdnParams]
    }

    pub fn name(self) -> &'static str {
        match self {
            ConditioningVariant::None => "none",
            ConditioningVariant::LatentScaling => "latent_scaling",
            ConditioningVariant::LatentAffine => "latent_affine",
            ConditioningVariant::LayerScaling => "layer_scaling",
            ConditioningVariant::LayerAffine => "layer_affine",
            ConditioningVariant::GdnParams => "gdn_params",
        }
    }

    fn has_shift(self) -> bool {
        matches!(self, ConditioningVariant::LatentAffine | ConditioningVariant::LayerAffine)
    }
}

/// Whether a transform maps source to latent or latent to source; latent
/// conditioning sits at the output of the former and the input of the latter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformRole {
    Analysis,
    Synthesis,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Input,
    /// After the activation of hidden layer `i`.
    Hidden(usize),
    Output,
}

/// `w = scale(lambda) * v + shift(lambda)` inserted at one site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteConditioning {
    pub site: Site,
    pub scale: LambdaSpline,
    pub shift: Option<LambdaSpline>,
}

/// Rate-dependent raw GDN parameters of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GdnConditioning {
    pub layer: usize,
    pub beta: LambdaSpline,
    pub gamma: LambdaSpline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub variant: ConditioningVariant,
    pub sites: Vec<SiteConditioning>,
    pub gdn: Vec<GdnConditioning>,
}

/// Fully connected network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpTransform {
    pub layers: Vec<Layer>,
    pub conditioning: Option<Conditioning>,
}

#[derive(Clone, Debug)]
struct LayerVars {
    w: Var,
    b: Var,
    gdn: Option<(Var, Var)>,
}

/// Tape handles for every parameter of an [`MlpTransform`].
#[derive(Clone, Debug)]
pub struct MlpVars {
    layers: Vec<LayerVars>,
    sites: Vec<(Var, Option<Var>)>,
    gdn: Vec<(Var, Var)>,
    all: Vec<Var>,
}

impl MlpVars {
    /// Handles in the same order as [`MlpTransform::params`].
    pub fn all(&self) -> &[Var] {
        &self.all
    }
}

fn init_uniform(rng: &mut impl Rng, out: usize, inp: usize) -> Tensor {
    let bound = 1.0 / (inp as f64).sqrt();
    let data = (0..out * inp).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(vec![out, inp], data).expect("finite init")
}

fn gdn_init(units: usize) -> Activation {
    let mut gamma = vec![0.01; units * units];
    for i in 0..units {
        gamma[i * units + i] = 0.1f64.sqrt();
    }
    Activation::Gdn {
        beta_raw: Tensor::full(&[units], 1.0),
        gamma_raw: Tensor::from_parts(vec![units, units], gamma),
    }
}

impl MlpTransform {
    /// Network with layer widths `dims` (input first), `nonlinearity` after
    /// every layer except the last, weights uniform in `+-1/sqrt(fan_in)` and
    /// zero biases.
    pub fn new(dims: &[usize], nonlinearity: Nonlinearity, rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(NtcError::InvalidArgument(format!("bad layer widths {dims:?}")));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let activation = if i + 1 == n {
                    Activation::None
                } else {
                    match nonlinearity {
                        Nonlinearity::Softplus => Activation::Softplus,
                        Nonlinearity::Gdn => gdn_init(dims[i + 1]),
                        Nonlinearity::None => Activation::None,
                    }
                };
                Layer {
                    weight: init_uniform(rng, dims[i + 1], dims[i]),
                    bias: Tensor::zeros(&[dims[i + 1]]),
                    activation,
                }
            })
            .collect();
        Ok(MlpTransform {
            layers,
            conditioning: None,
        })
    }

    /// Four-layer network `n -> hidden -> hidden -> hidden -> m`.
    pub fn four_layer(n: usize, hidden: usize, m: usize, nonlinearity: Nonlinearity, rng: &mut impl Rng) -> Result<Self> {
        Self::new(&[n, hidden, hidden, hidden, m], nonlinearity, rng)
    }

    /// A single affine layer initialized to the identity.
    pub fn affine_identity(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(NtcError::InvalidArgument("dimension must be positive".into()));
        }
        Ok(MlpTransform {
            layers: vec![Layer {
                weight: Tensor::eye(n),
                bias: Tensor::zeros(&[n]),
                activation: Activation::None,
            }],
            conditioning: None,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(NtcError::InvalidArgument("transform has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weight.shape().len() != 2 || l.bias.shape() != [l.out_dim()] {
                return Err(NtcError::dim("MlpTransform", format!("layer {i} shapes")));
            }
            if i > 0 && self.layers[i - 1].out_dim() != l.in_dim() {
                return Err(NtcError::dim("MlpTransform", format!("layer {i} does not chain")));
            }
            if let Activation::Gdn { beta_raw, gamma_raw } = &l.activation {
                if beta_raw.len() != l.out_dim() || gamma_raw.shape() != [l.out_dim(), l.out_dim()] {
                    return Err(NtcError::dim("MlpTransform", format!("layer {i} GDN shapes")));
                }
            }
        }
        if !matches!(self.layers[self.layers.len() - 1].activation, Activation::None) {
            return Err(NtcError::InvalidArgument("last layer must be linear".into()));
        }
        if let Some(c) = &self.conditioning {
            for s in &c.sites {
                s.scale.validate()?;
                if let Some(sh) = &s.shift {
                    sh.validate()?;
                }
            }
            for g in &c.gdn {
                g.beta.validate()?;
                g.gamma.validate()?;
            }
        }
        Ok(())
    }

    /// Adds neutral rate conditioning (scales 1, shifts 0, GDN splines equal
    /// to the current parameters) with `knots` knots over the given range.
    pub fn attach_conditioning(
        &mut self,
        variant: ConditioningVariant,
        role: TransformRole,
        lambda_min: f64,
        lambda_max: f64,
        knots: usize,
    ) -> Result<()> {
        let mut sites = Vec::new();
        let mut gdn = Vec::new();
        let mut add_site = |site: Site, width: usize| -> Result<()> {
            let scale = LambdaSpline::constant(lambda_min, lambda_max, knots, width, 1.0)?;
            let shift = if variant.has_shift() {
                Some(LambdaSpline::constant(lambda_min, lambda_max, knots, width, 0.0)?)
            } else {
                None
            };
            sites.push(SiteConditioning { site, scale, shift });
            Ok(())
        };
        match variant {
            ConditioningVariant::None => {}
            ConditioningVariant::LatentScaling | ConditioningVariant::LatentAffine => match role {
                TransformRole::Analysis => add_site(Site::Output, self.out_dim())?,
                TransformRole::Synthesis => add_site(Site::Input, self.in_dim())?,
            },
            ConditioningVariant::LayerScaling | ConditioningVariant::LayerAffine => {
                for i in 0..self.layers.len() - 1 {
                    add_site(Site::Hidden(i), self.layers[i].out_dim())?;
                }
            }
            ConditioningVariant::GdnParams => {
                for (i, l) in self.layers.iter().enumerate() {
                    if let Activation::Gdn { beta_raw, gamma_raw } = &l.activation {
                        gdn.push(GdnConditioning {
                            layer: i,
                            beta: LambdaSpline::from_rows(lambda_min, lambda_max, knots, beta_raw.data())?,
                            gamma: LambdaSpline::from_rows(lambda_min, lambda_max, knots, gamma_raw.data())?,
                        });
                    }
                }
                if gdn.is_empty() {
                    return Err(NtcError::InvalidArgument(
                        "GDN-parameter conditioning needs at least one GDN layer".into(),
                    ));
                }
            }
        }
        self.conditioning = Some(Conditioning { variant, sites, gdn });
        Ok(())
    }

    pub fn variant(&self) -> ConditioningVariant {
        self.conditioning
            .as_ref()
            .map_or(ConditioningVariant::None, |c| c.variant)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
            if let Activation::Gdn { beta_raw, gamma_raw } = &l.activation {
                out.push(beta_raw);
                out.push(gamma_raw);
            }
        }
        if let Some(c) = &self.conditioning {
            for s in &c.sites {
                out.push(&s.scale.values);
                if let Some(sh) = &s.shift {
                    out.push(&sh.values);
                }
            }
            for g in &c.gdn {
                out.push(&g.beta.values);
                out.push(&g.gamma.values);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            if let Activation::Gdn { beta_raw, gamma_raw } = &mut l.activation {
                out.push(beta_raw);
                out.push(gamma_raw);
            }
        }
        if let Some(c) = &mut self.conditioning {
            for s in &mut c.sites {
                out.push(&mut s.scale.values);
                if let Some(sh) = &mut s.shift {
                    out.push(&mut sh.values);
                }
            }
            for g in &mut c.gdn {
                out.push(&mut g.beta.values);
                out.push(&mut g.gamma.values);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Records every parameter as a leaf (differentiable when `trainable`).
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        let mut all = Vec::new();
        let mut leaf = |t: &Tensor, all: &mut Vec<Var>| {
            let v = if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            all.push(v);
            v
        };
        let mut layers = Vec::new();
        for l in &self.layers {
            let w = leaf(&l.weight, &mut all);
            let b = leaf(&l.bias, &mut all);
            let gdn = match &l.activation {
                Activation::Gdn { beta_raw, gamma_raw } => {
                    Some((leaf(beta_raw, &mut all), leaf(gamma_raw, &mut all)))
                }
                _ => None,
            };
            layers.push(LayerVars { w, b, gdn });
        }
        let mut sites = Vec::new();
        let mut gdn = Vec::new();
        if let Some(c) = &self.conditioning {
            for s in &c.sites {
                let sc = leaf(&s.scale.values, &mut all);
                let sh = s.shift.as_ref().map(|sh| leaf(&sh.values, &mut all));
                sites.push((sc, sh));
            }
            for g in &c.gdn {
                gdn.push((leaf(&g.beta.values, &mut all), leaf(&g.gamma.values, &mut all)));
            }
        }
        MlpVars {
            layers,
            sites,
            gdn,
            all,
        }
    }

    fn apply_site(
        &self,
        tape: &mut Tape,
        vars: &MlpVars,
        site: Site,
        h: Var,
        lambda: Option<f64>,
    ) -> Result<Var> {
        let Some(c) = &self.conditioning else {
            return Ok(h);
        };
        let Some(idx) = c.sites.iter().position(|s| s.site == site) else {
            return Ok(h);
        };
        let lambda = lambda.ok_or_else(|| {
            NtcError::InvalidArgument("conditioned transform evaluated without lambda".into())
        })?;
        let sc = &c.sites[idx];
        let (scale_var, shift_var) = vars.sites[idx];
        let s = sc.scale.eval_on_tape(tape, scale_var, lambda)?;
        let mut out = tape.mul(h, s)?;
        if let (Some(shift), Some(sv)) = (&sc.shift, shift_var) {
            let b = shift.eval_on_tape(tape, sv, lambda)?;
            out = tape.add(out, b)?;
        }
        Ok(out)
    }

    /// Forward pass of a `[B x in]` batch.
    pub fn forward(&self, tape: &mut Tape, vars: &MlpVars, x: Var, lambda: Option<f64>) -> Result<Var> {
        if let Some(l) = lambda {
            if !(l > 0.0) {
                return Err(NtcError::domain("mlp_forward", format!("lambda {l}")));
            }
        }
        let xs = tape.value(x).shape().to_vec();
        if xs.len() != 2 || xs[1] != self.in_dim() {
            return Err(NtcError::dim(
                "mlp_forward",
                format!("input {xs:?} for input dim {}", self.in_dim()),
            ));
        }
        let mut h = self.apply_site(tape, vars, Site::Input, x, lambda)?;
        let last = self.layers.len() - 1;
        for (i, (layer, lv)) in self.layers.iter().zip(&vars.layers).enumerate() {
            let r = tape.linear(h, lv.w, lv.b)?;
            h = match &layer.activation {
                Activation::None => r,
                Activation::Softplus => tape.softplus(r)?,
                Activation::Gdn { .. } => {
                    let units = layer.out_dim();
                    let spline = self
                        .conditioning
                        .as_ref()
                        .and_then(|c| c.gdn.iter().position(|g| g.layer == i));
                    let (beta_raw, gamma_raw) = match spline {
                        Some(j) => {
                            let lambda = lambda.ok_or_else(|| {
                                NtcError::InvalidArgument(
                                    "conditioned transform evaluated without lambda".into(),
                                )
                            })?;
                            let g = &self.conditioning.as_ref().unwrap().gdn[j];
                            let (bv, gv) = vars.gdn[j];
                            let b = g.beta.eval_on_tape(tape, bv, lambda)?;
                            let gflat = g.gamma.eval_on_tape(tape, gv, lambda)?;
                            (b, tape.reshape(gflat, &[units, units])?)
                        }
                        None => lv.gdn.expect("GDN layer has bound parameters"),
                    };
                    let b = tape.clamp_min(beta_raw, GDN_BETA_FLOOR)?;
                    let beta = tape.square(b)?;
                    let g = tape.clamp_min(gamma_raw, 0.0)?;
                    let gamma = tape.square(g)?;
                    tape.gdn(r, beta, gamma)?
                }
            };
            if i < last {
                h = self.apply_site(tape, vars, Site::Hidden(i), h, lambda)?;
            }
        }
        self.apply_site(tape, vars, Site::Output, h, lambda)
    }

    /// Untracked forward pass of a `[B x in]` batch.
    pub fn apply(&self, x: &Tensor, lambda: Option<f64>) -> Result<Tensor> {
        if x.shape().len() != 2 {
            return Err(NtcError::dim("mlp_apply", format!("input {:?}", x.shape())));
        }
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        let mut out = Vec::with_capacity(rows * self.out_dim());
        for start in (0..rows).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(rows);
            let chunk = Tensor::from_parts(vec![end - start, cols], x.data()[start * cols..end * cols].to_vec());
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape, false);
            let xv = tape.constant(chunk);
            let y = self.forward(&mut tape, &vars, xv, lambda)?;
            out.extend_from_slice(tape.value(y).data());
        }
        let result = Tensor::from_parts(vec![rows, self.out_dim()], out);
        if !result.all_finite() {
            return Err(NtcError::NonFinite {
                context: "transform output".into(),
            });
        }
        Ok(result)
    }

    /// Untracked forward pass of a single vector.
    pub fn apply_one(&self, x: &[f64], lambda: Option<f64>) -> Result<Vec<f64>> {
        let t = Tensor::new(vec![1, x.len()], x.to_vec())?;
        Ok(self.apply(&t, lambda)?.into_data())
    }
}
