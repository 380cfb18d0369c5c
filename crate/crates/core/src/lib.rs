//! Hierarchical hourglass attention network for 2x texture synthesis.
//!
//! The crate is generic over the scalar type: `f32` for training, `f64` for
//! finite-difference verification. Concrete aliases live at the crate root.

pub mod adam;
pub mod attnviz;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
mod kernels;
mod par;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod spectral;
pub mod tensor;
pub mod train;
pub mod scalar;

pub use graph::{Graph, TensorId};
pub use scalar::{Dtype, Scalar};
pub use tensor::{Tensor, TensorError, TensorResult};

/// Training-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Verification-precision tensor.
pub type Tensor64 = Tensor<f64>;
/// Training-precision graph.
pub type Graph32 = Graph<f32>;
/// Verification-precision graph.
pub type Graph64 = Graph<f64>;
