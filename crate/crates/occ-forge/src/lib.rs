//! Numerical core of a LiDAR-camera BEV fusion and 3D semantic occupancy
//! prediction pipeline.
//!
//! The crate provides the full chain as pure, testable kernels: projection
//! geometry, semantic/depth-guided view transformation, neighborhood-attention
//! BEV fusion, occupancy-driven distillation weighting, channel-to-height
//! occupancy decoding, losses, and evaluation metrics — plus a procedural
//! scene generator and an orchestration layer used by the `occ-forge` CLI.

pub mod distill;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod numeric;
pub mod occupancy;
pub mod pipeline;
pub mod scene;
pub mod view_transform;

pub use error::{Error, Result};

// The geometry API is expressed in nalgebra types; re-export the crate so
// downstream users match versions without a separate dependency.
pub use nalgebra;
