//! Analysis and synthesis transforms: fully connected networks with softplus
//! or GDN nonlinearities, affine transforms, the KLT, and rate conditioning.

mod klt;
mod mlp;
mod spline;

pub use klt::{klt_from_samples, sample_covariance};
pub use mlp::{
    Activation, Conditioning, ConditioningVariant, GdnConditioning, Layer, MlpTransform, MlpVars,
    Nonlinearity, Site, SiteConditioning, TransformRole, GDN_BETA_FLOOR,
};
pub use spline::{locate, spline_eval, KnotPosition, LambdaSpline, DEFAULT_KNOTS};

/// Single affine layer initialized to the identity, used for both transforms
/// of a linear transform code.
pub fn make_ltc(n: usize) -> crate::Result<MlpTransform> {
    MlpTransform::affine_identity(n)
}
