//! Query-based 3D instance segmentation on voxelized point clouds.
//!
//! The pipeline: voxelize a colored point cloud, run a sparse voxel
//! encoder-decoder to get a multi-resolution feature pyramid, refine a set of
//! instance queries with a masked-attention Transformer decoder, decode each
//! query into a class plus a per-voxel heatmap, and train end-to-end with
//! Hungarian-matched dice/BCE/CE losses. Everything runs in f64 on a single
//! CPU core and is differentiable through a recording tape.

pub mod autodiff;
pub mod backbone;
pub mod decoder;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod model;
pub mod scenegen;
pub mod supervision;
pub mod trainer;

pub use error::{Error, Result};
