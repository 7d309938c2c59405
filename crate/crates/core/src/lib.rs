//! Diffusion models with a learned noise-level estimator and adaptive
//! noise-schedule sampling.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::RealBuffer;
