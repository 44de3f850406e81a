//! Core numerics for generating a student network's weights from the
//! weights of several teacher networks.
//!
//! All math is generic over [`Scalar`] (`f32` or `f64`). The aliases at the
//! bottom of this file fix the precision used for training and for
//! gradient checks.

pub mod arch;
pub mod autograd;
pub mod codec;
pub mod error;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod weights;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Training precision.
pub type TensorF32 = Tensor<f32>;
/// Gradient-check precision.
pub type TensorF64 = Tensor<f64>;

pub type WeightSetF32 = weights::WeightSet<f32>;
pub type WeightSetF64 = weights::WeightSet<f64>;
pub type GeneratorF32 = generator::Generator<f32>;
pub type GeneratorF64 = generator::Generator<f64>;
