//! Attention-aware student-teacher distillation for multi-class anomaly
//! detection.

pub mod autograd;
pub mod backbone;
pub mod config;
pub mod corpus;
pub mod data;
pub mod dcam;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod ops;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::{Precision, Real, Tensor};
