//! Distills a trained convolutional classifier (the *performer*) into an
//! *explainer* network whose interpretable filters respond to single object
//! parts, and evaluates how consistently those filters localize parts.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod explainer;
pub mod filter_loss;
pub mod imageio;
pub mod optim;
pub mod performer;
pub mod rng;
pub mod synth;
pub mod templates;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
