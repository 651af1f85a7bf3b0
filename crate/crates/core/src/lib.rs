//! Nonlinear transform coding on low-dimensional synthetic sources.
//!
//! The crate trains entropy-constrained vector quantizers and learned
//! transform codes, evaluates their operational rate-distortion performance
//! and compares it against analytical baselines.

pub mod autodiff;
pub mod codec;
pub mod diagnostics;
pub mod entropy_model;
pub mod error;
pub mod optim;
pub mod oracles;
pub mod quantization;
pub mod rd;
pub mod serialize;
pub mod sources;
pub mod stats;
pub mod training;
pub mod transforms;
pub mod vecvq;

pub use error::{NtcError, Result};
