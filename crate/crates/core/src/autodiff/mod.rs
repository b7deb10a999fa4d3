//! Reverse-mode automatic differentiation on small dense f64 tensors.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
