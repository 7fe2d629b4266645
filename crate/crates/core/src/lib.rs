//! Latent-space video world model: a cross-attention predictor over frozen
//! frame features, action conditioning, latent planning and evaluation.

mod bytes;
mod linalg;

pub mod config;
pub mod data;
pub mod encoder;
pub mod env;
pub mod error;
pub mod image;
pub mod action;
pub mod checkpoint;
pub mod nn;
pub mod planner;
pub mod predictor;
pub mod probes;
pub mod rollout;
pub mod rope;
pub mod scenarios;
pub mod training;

pub use error::{Error, Result};
