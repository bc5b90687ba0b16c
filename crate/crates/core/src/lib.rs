//! Block-based neural network library.
//!
//! The numeric core is generic over the scalar type via [`Scalar`]: train in
//! `f32`, gradient-check in `f64`. Concrete aliases for both live at the crate
//! root.

pub mod blocks;
pub mod brain;
pub mod config;
pub mod engine;
pub mod error;
pub mod kid;
pub mod kongfu;
pub mod observer;
pub mod scalar;
pub mod sensor;
pub mod tensor;
pub mod tuner;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Pcg32, Tensor};

/// Single-precision tensor, the default for training.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor, used by the gradient-check suites.
pub type Tensor64 = tensor::Tensor<f64>;

/// Single-precision model graph.
pub type Brain32 = brain::Brain<f32>;
/// Double-precision model graph.
pub type Brain64 = brain::Brain<f64>;
/// Single-precision dataset source.
pub type Source32 = sensor::Source<f32>;
/// Single-precision batch feeder.
pub type FeedSensor32 = sensor::FeedSensor<f32>;
/// Single-precision optimizer.
pub type KongFu32 = kongfu::KongFu<f32>;
/// Single-precision data-parallel engine.
pub type Engine32 = engine::Engine<f32>;
/// Single-precision training driver.
pub type Kid32 = kid::Kid<f32>;
