//! Tape-based reverse-mode differentiation over dense `f64` tensors.

pub mod fault;
mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, GradCheckOptions};
pub use tape::{ConvGeometry, Gradients, Tape, Var};
pub use tensor::Tensor;
