//! Reverse-mode differentiation over small dense tensors.
//!
//! A [`Graph`] records every operation as it is evaluated. Each op validates
//! its operand shapes and rejects non-finite results, so a NaN is reported at
//! the op that produced it rather than at the loss. Broadcasting is limited
//! to adding a vector to every row of a batch.

mod graph;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
