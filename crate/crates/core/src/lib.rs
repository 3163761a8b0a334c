//! Occlusion-aware vision-language pipeline: a dual visual encoder whose
//! second branch reconstructs the occluded object from a learned signed
//! distance field, fused into the token stream of a small autoregressive
//! language model.

pub mod autograd;
pub mod checkpoint;
pub mod classifier;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod exec;
pub mod geometry;
pub mod lm;
pub mod matrix;
pub mod nn;
pub mod pipeline;
pub mod real;
pub mod reconstruction;
pub mod sdf_training;
pub mod train;
pub mod vision;
mod mc_tables;

pub use error::{Error, Result};
pub use exec::Execution;
pub use matrix::Matrix;
pub use real::Real;
