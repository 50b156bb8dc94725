//! Tensors and reverse-mode differentiation.

mod tape;
mod tensor;

pub use tape::{grad_check, Gradients, Tape, Var};
pub use tensor::{sigmoid, softplus, Tensor};
