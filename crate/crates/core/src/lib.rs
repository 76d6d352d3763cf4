//! Dual-stream event-camera classification.
//!
//! Event streams are rendered two ways: as stacks of two-channel count
//! images and as sparse voxel sets. The image stack is embedded by a small
//! convolutional stem and encoded by a space-time transformer; the voxels are
//! connected into a radius graph and encoded with Gaussian-mixture graph
//! convolutions. Learnable bottleneck tokens carry information between the
//! two streams before a two-layer classification head.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cache;
pub mod config;
pub mod checkpoint;
pub mod error;
pub mod event_io;
pub mod io_util;
pub mod model;
pub mod nn;
pub mod representations;
pub mod synthetic;
#[cfg(test)]
mod test_support;
pub mod training;
pub mod voxel_graph;

pub use error::{Error, Result};
