//! Position-sensitive region detector (R-FCN style) with configurable
//! residual backbones, built on a small reverse-mode autograd core.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the aliases
//! below pin the two precisions.

pub mod checkpoint;
pub mod config;
pub mod detect;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod inference;
pub mod kernels;
pub mod kv;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use scalar::Real;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
