//! Dense tensors and tape-based reverse-mode differentiation.

pub mod gradcheck;
pub mod kernels;
mod param;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport, GroupCheck};
pub use param::{ParamGroup, ParamStore, Parameter};
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
