//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every op of one forward pass; [`Tape::backward`] walks it
//! in reverse. All kernels are single-threaded with a fixed accumulation order,
//! so a forward/backward pass is bit-reproducible.

mod tape;
mod tensor;

pub use tape::{
    finite_difference, max_relative_error, sigmoid, Gradients, ParentGrads, SparseRows, Tape, Var,
};
pub use tensor::Tensor;
