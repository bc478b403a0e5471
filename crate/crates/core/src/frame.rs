//! Sensor data model: camera frames, IMU samples and the merged event stream.

use nalgebra::Vector3;

use crate::geometry::{CameraIntrinsics, Pose};
use crate::img::Image;

/// One RGB-D observation, already converted to grayscale + metric depth.
#[derive(Debug, Clone)]
pub struct Frame {
    pub timestamp: f64,
    /// Grayscale intensity in [0, 255].
    pub intensity: Image<f32>,
    /// Depth in meters, 0 = invalid.
    pub depth: Image<f32>,
}

impl Frame {
    pub fn new(timestamp: f64, intensity: Image<f32>, depth: Image<f32>) -> Self {
        assert_eq!(intensity.width, depth.width);
        assert_eq!(intensity.height, depth.height);
        Self { timestamp, intensity, depth }
    }
}

/// One inertial measurement in the IMU body frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub timestamp: f64,
    /// Specific force, m/s^2.
    pub accel: Vector3<f64>,
    /// Angular velocity, rad/s.
    pub gyro: Vector3<f64>,
}

/// Static sequence parameters shared by loading, generation and tracking.
#[derive(Debug, Clone)]
pub struct SequenceConfig {
    pub intrinsics: CameraIntrinsics,
    /// Rigid extrinsic mapping IMU coordinates to camera coordinates.
    pub imu_extrinsic: Pose,
    /// Gravity in the world frame, m/s^2.
    pub gravity_world: Vector3<f64>,
    pub imu_rate: f64,
    pub camera_rate: f64,
}

impl SequenceConfig {
    pub fn new(intrinsics: CameraIntrinsics, imu_rate: f64, camera_rate: f64) -> Self {
        assert!(imu_rate > camera_rate, "IMU must sample faster than the camera");
        Self {
            intrinsics,
            imu_extrinsic: Pose::identity(),
            gravity_world: Vector3::new(0.0, 0.0, -9.81),
            imu_rate,
            camera_rate,
        }
    }
}

/// On-disk form of [`SequenceConfig`] (`sequence.toml` next to the images).
/// The extrinsic rotation is stored as an axis-angle vector.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceConfigFile {
    pub camera: CameraIntrinsics,
    pub imu_rate: f64,
    pub camera_rate: f64,
    #[serde(default = "default_gravity")]
    pub gravity: [f64; 3],
    #[serde(default)]
    pub imu_extrinsic_rotation: [f64; 3],
    #[serde(default)]
    pub imu_extrinsic_translation: [f64; 3],
}

fn default_gravity() -> [f64; 3] {
    [0.0, 0.0, -9.81]
}

impl SequenceConfigFile {
    pub fn from_config(config: &SequenceConfig) -> Self {
        let axis_angle = crate::geometry::rotation_log(&config.imu_extrinsic.rotation);
        Self {
            camera: config.intrinsics,
            imu_rate: config.imu_rate,
            camera_rate: config.camera_rate,
            gravity: config.gravity_world.into(),
            imu_extrinsic_rotation: axis_angle.into(),
            imu_extrinsic_translation: config.imu_extrinsic.translation.into(),
        }
    }

    pub fn to_config(&self) -> SequenceConfig {
        SequenceConfig {
            intrinsics: self.camera,
            imu_extrinsic: Pose::new(
                crate::geometry::rotation_exp(&Vector3::from(self.imu_extrinsic_rotation)),
                Vector3::from(self.imu_extrinsic_translation),
            ),
            gravity_world: Vector3::from(self.gravity),
            imu_rate: self.imu_rate,
            camera_rate: self.camera_rate,
        }
    }
}

/// Time-ordered union of camera frames and IMU samples.
#[derive(Debug, Clone)]
pub enum SequenceEvent {
    Frame(Frame),
    Imu(ImuSample),
}

impl SequenceEvent {
    pub fn timestamp(&self) -> f64 {
        match self {
            SequenceEvent::Frame(f) => f.timestamp,
            SequenceEvent::Imu(s) => s.timestamp,
        }
    }
}
