//! Cross-resolution person re-identification with a recovery decoder.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the element type for the two common uses: `f32` for training and
//! evaluation, `f64` for finite-difference checks.

pub mod checkpoint;
pub mod conv;
pub mod datapipe;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod graph;
pub mod kv;
pub mod losses;
pub mod network;
pub mod optim;
pub mod params;
pub mod rng;
pub mod run;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
pub type ParamStoreF32 = ParamStore<f32>;
pub type ParamStoreF64 = ParamStore<f64>;
pub type TrainerF32 = trainer::Trainer<f32>;
pub type TrainerF64 = trainer::Trainer<f64>;
