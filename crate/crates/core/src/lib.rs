//! State-space GAN inversion and editing at desk scale.
//!
//! The crate wires a selective-scan (S6/SS2D) encoder and a direction-aware
//! Fuser around a toy modulated-convolution generator, trains the pair on
//! synthetic image/edit pairs sampled from the generator itself, and ships
//! the evaluation and cost-accounting harness used by the CLI.

pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod features;
pub mod fuser;
pub mod gradcheck;
pub mod metrics;
pub mod graph;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod ssm;
pub mod stylegen;
pub mod tensor;
pub mod train;
pub mod vssm;

pub use error::{Error, Result};
pub use tensor::Tensor;
