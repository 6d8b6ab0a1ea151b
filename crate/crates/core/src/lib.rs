//! 4D radar-visual odometry at desk scale: multi-scale point/image feature
//! pyramids, adaptive radar-camera fusion, velocity-guided point confidence
//! and coarse-to-fine pose refinement, together with a synthetic scene
//! generator, dataset I/O, a training loop and trajectory metrics.
//!
//! All numeric code is generic over the scalar type ([`scalar::Scalar`]):
//! the training path runs in `f32`, gradient checks and geometry oracles in
//! `f64`. Concrete aliases for the common types are exported below.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod confidence;
pub mod cost_volume;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod network;
pub mod nn;
pub mod pointcloud;
pub mod pointnet;
pub mod scalar;
pub mod train;

pub use error::{Result, RvoError};
pub use scalar::Scalar;

/// Pose in the default training precision.
pub type Pose32 = geometry::Pose<f32>;
/// Pose in test/oracle precision.
pub type Pose64 = geometry::Pose<f64>;
pub type RigidTransform32 = geometry::RigidTransform<f32>;
pub type RigidTransform64 = geometry::RigidTransform<f64>;
pub type Calibration32 = geometry::Calibration<f32>;
pub type Calibration64 = geometry::Calibration<f64>;
pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
