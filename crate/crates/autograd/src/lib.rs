//! Tape-based reverse-mode automatic differentiation over dense, row-major CPU
//! tensors. Supports the operator set needed by convolutional autoencoders and
//! transformer denoisers: GEMM-backed linear and convolution layers, group and
//! layer normalization, fused multi-head attention, patch (un)folding and the
//! usual pointwise nonlinearities.
//!
//! Every op is generic over [`Float`], so the same model code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

mod float;
mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use float::{gemm, Float, MatView};
pub use graph::{Gradients, Graph, Var};
pub use optim::{clip_grad_norm, AdamW};
pub use params::{Init, ParamId, ParamSet};
pub use tensor::Tensor;
