//! Multimodal (LiDAR + camera) 4D panoptic segmentation.
//!
//! The crate covers the whole pipeline at desk scale: a synthetic scene
//! generator, a toy multimodal encoder, a query-based panoptic decoder with
//! soft-masked cross-attention, two-stage training, a learned tracklet
//! association module with a memory bank, and the 4D panoptic metric suite.

pub mod autodiff;
pub mod decoder;
pub mod encoder;
pub mod geometry;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod par;
pub mod supervision;
pub mod synthworld;
pub mod tracking;
