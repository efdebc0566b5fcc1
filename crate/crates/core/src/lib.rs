//! Stochastic channel decorrelation (SCD) for fully-convolutional Siamese
//! matching networks, on top of a small reverse-mode autodiff engine.

pub mod autograd;
pub mod commands;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod nn;
pub mod scd;
pub mod siamese;
pub mod tensor;
pub mod trainer;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Dims, Tensor4};
