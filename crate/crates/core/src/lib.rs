//! Single-stage LiDAR 3D object detection with hybrid voxel/point features.
//!
//! The pipeline voxelizes a point cloud into pillars, encodes them with a
//! tiny PointNet, fuses each pillar with its most similar point-level
//! features (or, at inference, with items from a learned memory bank),
//! scatters the result into a pseudo image, and runs a multi-scale 2D
//! backbone with scale-aware spatial attention followed by an anchor head.

pub mod backbone;
pub mod config;
pub mod difftensor;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradsuite;
pub mod head;
pub mod memory;
pub mod model;
pub mod nn;
pub mod pillars;
pub mod pipeline;
pub mod scene;

pub use error::{HvprError, Result};
