//! A minimal tape-based reverse-mode autodiff engine over `ndarray`.
//!
//! The engine is deliberately small: a [`Graph`] records one forward pass as a
//! tape of nodes, [`Graph::backward`] replays it in reverse, and everything is
//! generic over [`Scalar`] so the same operators run in `f32` for speed and in
//! `f64` for finite-difference gradient checking. Tensors are reference
//! counted ([`Tensor`]), so recording an op captures its inputs without
//! copying them.
//!
//! Only the operators needed by this crate's models are implemented, each with
//! a hand-derived backward. Convolution lowers to im2col + GEMM and recomputes
//! the column buffer in the backward pass instead of storing it.

mod check;
mod graph;
mod init;
mod ops;
mod optim;
mod params;
mod scalar;

#[cfg(test)]
mod op_tests;

pub use check::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Tensor, Var};
pub use init::{kaiming_uniform, uniform_bias, zeros};
pub use ops::conv2d_output_size;
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamSet};
pub use scalar::Scalar;
