//! Deterministic single-process simulator of tensor-parallel transformers in
//! which the activation all-reduce is replaced by a partial channel-reduce.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the 64-bit precision the simulator uses by
//! default.

pub mod collectives;
pub mod error;
pub mod perf;
pub mod precision;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use collectives::{CommLedger, PartialReduceSpec, RankSet};
pub use error::{Error, Result};
pub use precision::PrecisionMode;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type RankSet64 = RankSet<f64>;
pub type RankSet32 = RankSet<f32>;
pub type CaatModel64 = train::CaatModel<f64>;
pub type CaatModel32 = train::CaatModel<f32>;
