//! Semantic Gaussian-mixture bundle adjustment for labeled LiDAR scans.
//!
//! Each semantic class is modeled as its own layer of voxel-initialized
//! Gaussians. Poses and landmarks are refined jointly by ECM over a window of
//! keyframes, and a condition-number test on the linearized pose problem
//! decides which classes take part or whether the window is left untouched.

pub mod cli;
pub mod cloud_io;
pub mod degeneracy;
pub mod em_solver;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gmm_map;
pub mod synth;
pub mod window_ba;

pub use error::{Error, Result};
