#![allow(clippy::needless_range_loop)]

//! Minimal dense `f64` tensors and reverse-mode differentiation.
//!
//! Sized for small transformers: every op works on rank ≤ 2 matrices (rank-3
//! tensors are viewed as stacked rows), and gradients are checked against the
//! central finite-difference oracle in [`fd`].

mod error;
pub mod fd;
mod graph;
mod tensor;

pub use error::{Result, TensorError};
pub use fd::{finite_diff_grad, max_relative_error};
pub use graph::{masked_softmax_in_place, softmax_in_place, Graph, Var};
pub use tensor::Tensor;
