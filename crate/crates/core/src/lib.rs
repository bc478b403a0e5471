//! RGB-D-inertial indoor scene reconstruction.
//!
//! Fuses grayscale, depth and IMU measurements in an iterated extended Kalman
//! filter. Camera motion is tracked with geometry-aware deformable patch
//! features; posed depth is fused into a TSDF volume from which surface
//! meshes can be extracted.

pub mod fast;
pub mod filter;
pub mod frame;
pub mod geometry;
pub mod patch;
pub mod pipeline;
pub mod img;
pub mod imu;
pub mod maintenance;
pub mod mesh;
pub mod metrics;
pub mod synth;
pub mod tsdf;
pub mod tum;
