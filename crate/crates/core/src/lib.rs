//! Coarse-to-fine LiDAR loop closure on shared bird's-eye-view features.
//!
//! Scans are voxelized into multi-layer binary BEV grids, encoded once by a
//! residual convolutional network, and the resulting feature volumes serve
//! both stages: an attention-guided NetVLAD descriptor for fast Top-K
//! retrieval, and a cross-attention overlap estimator that picks the final
//! match among those K candidates.

pub mod checks;
pub mod config;
pub mod dataset;
pub mod descriptor;
pub mod encoder;
pub mod error;
pub mod overlap;
pub mod pipeline;
pub mod retrieval;
pub mod tensor;
pub mod trainer;
pub mod voxel;

pub use error::{Error, Result};
