//! CNN training toolkit: tensors with reverse-mode autodiff, ResNet variants,
//! training refinements and a deterministic training loop.

pub mod ablate;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod init;
pub mod kernels;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod precision;
pub mod report;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Tensor};
