//! Guided-upsampling monocular depth estimation on a small CPU tensor engine.

// `!(x > 0.0)` is how validation rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod tensor;
pub mod train;

pub use tensor::{Scalar, Shape, Tape, Tensor, TensorError, Var};
