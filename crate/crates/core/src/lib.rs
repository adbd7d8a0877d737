//! Weighted multi-region two-stream action recognition at desk scale.
//!
//! The network math is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the double-precision types used by the pipeline.

pub mod checkpoint;
pub mod error;
pub mod flow;
pub mod frame;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod net;
pub mod optim;
pub mod pipeline;
pub mod region;
pub mod runtime;
pub mod scalar;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Random generator used everywhere a seed is consumed.
pub type WmrRng = rand_chacha::ChaCha8Rng;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Model64 = net::WmrModel<f64>;
pub type Model32 = net::WmrModel<f32>;
