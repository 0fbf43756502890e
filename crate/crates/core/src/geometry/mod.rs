//! Calibration, projection, voxelization, point↔voxel transfer and
//! positional encodings.

mod camera;
mod encoding;
mod sampling;
mod voxel;

pub use camera::{first_visible, project, CameraModel, Mat3, Projection, Vec3};
pub use encoding::{positional_encoding, sinusoidal_expand, PositionalEncoder, SinusoidalExpander};
pub use sampling::{bilinear_taps, sample_image_features, MapShape};
pub use voxel::{downsample, p2v_scatter_mean, parent_of, v2p_gather, voxel_of, voxelize, SparseVoxelGrid, VoxelCoord, VoxelPyramid};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid camera model: {0}")]
    InvalidCamera(String),
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
}

#[cfg(test)]
mod tests;
