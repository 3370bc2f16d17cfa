//! Densely connected convolutional acoustic models with gradient-reversal
//! domain-adversarial training, plus the SNR-controlled noise mixing and
//! log-Mel feature pipeline used to drive them.

pub mod adversarial;
pub mod autodiff;
pub mod checkpoint;
pub mod densenet;
pub mod error;
pub mod experiment;
pub mod features;
pub mod gradcheck;
pub mod noise;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Precision, Real, Tensor};
