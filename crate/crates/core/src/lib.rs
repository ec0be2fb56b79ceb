//! Consistency training for discrete diffusion language models on small,
//! fully enumerable token spaces.
//!
//! The numeric modules are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common `f64` instantiations.

pub mod chain;
pub mod cli;
pub mod data_eval;
pub mod denoiser;
pub mod error;
pub mod objective;
pub mod oracle;
pub mod sampler;
pub mod scalar;
pub mod trainer;

pub use error::{CdlmError, Result};
pub use scalar::Scalar;

pub type Categorical = chain::CategoricalDistribution<f64>;
pub type Transition = chain::TransitionMatrix<f64>;
pub type Grid = denoiser::PredictionGrid<f64>;
pub type Params = denoiser::DenoiserParams<f64>;
pub type Ema = denoiser::EmaState<f64>;
