//! Adversarial-input detection by self-verification of a classifier's
//! internal evidence against per-class profiles.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! detection pipeline runs on `f32` models.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activation;
pub mod ascent;
pub mod attack;
pub mod audio;
pub mod bundle;
pub mod cam;
pub mod desk;
pub mod detect;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod introspection;
pub mod network;
pub mod pnm;
pub mod profiler;
pub mod scalar;
pub mod spectrum;
pub mod tensor;

pub use error::{Error, Result};
pub use network::{LayerSpec, Network, NetworkSpec, Objective};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Network32 = Network<f32>;
pub type Network64 = Network<f64>;
