//! Reverse-mode automatic differentiation over dense `f64` arrays.

mod check;
mod tape;
mod tensor;

pub use check::grad_check;
pub use tape::{softplus, BinaryKind, Gradients, Tape, UnaryKind, Var, BIN_MASS_FLOOR, MIN_LOGISTIC_SCALE};
pub(crate) use tape::{log_softmax_raw, MixtureParams};
pub use tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, transpose_raw, Tensor};
