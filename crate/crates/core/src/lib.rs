//! Rotated-kernel multi-view feature synthesis and cross-view attention
//! for semantic scene completion on voxel grids.

pub mod attention;
pub mod checks;
pub mod cli;
pub mod config;
pub mod cvtr;
pub mod error;
pub mod gradcheck;
pub mod kernel;
pub mod metrics;
pub mod model;
pub mod mvfs;
pub mod nn;
pub mod rng;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
