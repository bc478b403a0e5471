//! Synthetic RGB-D + IMU sequence generation from analytic scenes and
//! C^2 trajectories, with exact ground truth. Replaces hardware capture in
//! tests and benchmarks.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::frame::{Frame, ImuSample, SequenceConfig, SequenceEvent};
use crate::geometry::{rotation_exp, CameraIntrinsics, Pose};
use crate::img::Image;
use crate::tum::{self, FrameIoError, TrajectoryEntry};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("trajectory produces non-finite derivatives at t={0}")]
    NonDifferentiableTrajectory(f64),
    #[error(transparent)]
    Io(#[from] FrameIoError),
}

// ---------------------------------------------------------------------------
// Scene

/// Smooth procedural 3D texture: base + sum of sinusoids of world position.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Texture {
    pub base: f64,
    pub waves: Vec<TextureWave>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TextureWave {
    pub amplitude: f64,
    /// Spatial frequency, rad/m per axis.
    pub frequency: [f64; 3],
    pub phase: f64,
}

impl Texture {
    pub fn intensity(&self, p: &Vector3<f64>) -> f64 {
        let mut v = self.base;
        for w in &self.waves {
            let f = Vector3::new(w.frequency[0], w.frequency[1], w.frequency[2]);
            v += w.amplitude * (f.dot(p) + w.phase).sin();
        }
        v.clamp(0.0, 255.0)
    }

    /// Bandlimited texture suitable for direct tracking at the given pixel
    /// footprint (meters per pixel at typical depth).
    pub fn default_random(rng: &mut ChaCha8Rng, wavelength_m: f64) -> Self {
        let k = std::f64::consts::TAU / wavelength_m;
        let waves = (0..6)
            .map(|_| TextureWave {
                amplitude: rng.gen_range(15.0..30.0),
                frequency: [
                    rng.gen_range(-k..k),
                    rng.gen_range(-k..k),
                    rng.gen_range(-k..k),
                ],
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
            })
            .collect();
        Texture { base: 128.0, waves }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    /// Infinite plane through `point` with unit `normal`.
    Plane { point: [f64; 3], normal: [f64; 3] },
    /// Finite rectangle: center, unit normal, in-plane x axis, half extents.
    Rect { center: [f64; 3], normal: [f64; 3], axis_u: [f64; 3], half_u: f64, half_v: f64 },
    Sphere { center: [f64; 3], radius: f64 },
    /// Axis-aligned box.
    AxisBox { min: [f64; 3], max: [f64; 3] },
}

fn v3(a: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

impl Primitive {
    /// Smallest positive ray parameter, ray `o + t d` (d need not be unit).
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        const EPS: f64 = 1e-9;
        match self {
            Primitive::Plane { point, normal } => {
                let n = v3(normal);
                let denom = n.dot(d);
                if denom.abs() < EPS {
                    return None;
                }
                let t = n.dot(&(v3(point) - o)) / denom;
                (t > EPS).then_some(t)
            }
            Primitive::Rect { center, normal, axis_u, half_u, half_v } => {
                let n = v3(normal);
                let denom = n.dot(d);
                if denom.abs() < EPS {
                    return None;
                }
                let c = v3(center);
                let t = n.dot(&(c - o)) / denom;
                if t <= EPS {
                    return None;
                }
                let hit = o + d * t;
                let u_axis = v3(axis_u).normalize();
                let v_axis = n.cross(&u_axis);
                let rel = hit - c;
                (rel.dot(&u_axis).abs() <= *half_u && rel.dot(&v_axis).abs() <= *half_v)
                    .then_some(t)
            }
            Primitive::Sphere { center, radius } => {
                let oc = o - v3(center);
                let a = d.dot(d);
                let b = 2.0 * oc.dot(d);
                let c = oc.dot(&oc) - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t0 = (-b - sq) / (2.0 * a);
                let t1 = (-b + sq) / (2.0 * a);
                if t0 > EPS {
                    Some(t0)
                } else if t1 > EPS {
                    Some(t1)
                } else {
                    None
                }
            }
            Primitive::AxisBox { min, max } => {
                let (mn, mx) = (v3(min), v3(max));
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                for i in 0..3 {
                    if d[i].abs() < EPS {
                        if o[i] < mn[i] || o[i] > mx[i] {
                            return None;
                        }
                        continue;
                    }
                    let (mut t0, mut t1) = ((mn[i] - o[i]) / d[i], (mx[i] - o[i]) / d[i]);
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    t_near = t_near.max(t0);
                    t_far = t_far.min(t1);
                }
                if t_near > t_far {
                    return None;
                }
                if t_near > EPS {
                    Some(t_near)
                } else if t_far > EPS {
                    Some(t_far)
                } else {
                    None
                }
            }
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SceneObject {
    #[serde(flatten)]
    pub primitive: Primitive,
    pub texture: Texture,
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
}

impl Scene {
    /// Nearest hit along the ray; returns (ray parameter, hit point, object index).
    pub fn raycast(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (i, obj) in self.objects.iter().enumerate() {
            if let Some(t) = obj.primitive.intersect(o, d) {
                if best.map_or(true, |(bt, _)| t < bt) {
                    best = Some((t, i));
                }
            }
        }
        best.map(|(t, i)| (t, o + d * t, i))
    }
}

// ---------------------------------------------------------------------------
// Trajectories

/// Analytic C^2 camera trajectories. Rotation is about a fixed body axis so
/// angular velocity has a closed form.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    Static {
        position: [f64; 3],
        #[serde(default)]
        rotation: [f64; 3],
    },
    /// Constant linear velocity, fixed orientation.
    Line {
        start: [f64; 3],
        velocity: [f64; 3],
        #[serde(default)]
        rotation: [f64; 3],
    },
    /// Circular orbit in the world x-y plane, fixed orientation.
    Orbit {
        center: [f64; 3],
        radius: f64,
        angular_rate: f64,
        #[serde(default)]
        rotation: [f64; 3],
    },
    /// Per-axis sinusoidal translation plus sinusoidal rotation about a fixed
    /// body axis: p(t) = p0 + A sin(2 pi f t + phi), theta(t) = a sin(2 pi g t).
    Sinusoid {
        position: [f64; 3],
        #[serde(default)]
        rotation: [f64; 3],
        trans_amplitude: [f64; 3],
        trans_frequency: [f64; 3],
        #[serde(default)]
        trans_phase: [f64; 3],
        rot_axis: [f64; 3],
        rot_amplitude: f64,
        rot_frequency: f64,
    },
}

const TAU: f64 = std::f64::consts::TAU;

impl Trajectory {
    fn base_rotation(rot: &[f64; 3]) -> Matrix3<f64> {
        rotation_exp(&v3(rot))
    }

    pub fn pose(&self, t: f64) -> Pose {
        match self {
            Trajectory::Static { position, rotation } => {
                Pose::new(Self::base_rotation(rotation), v3(position))
            }
            Trajectory::Line { start, velocity, rotation } => {
                Pose::new(Self::base_rotation(rotation), v3(start) + v3(velocity) * t)
            }
            Trajectory::Orbit { center, radius, angular_rate, rotation } => {
                let a = angular_rate * t;
                let p = v3(center) + Vector3::new(radius * a.cos(), radius * a.sin(), 0.0);
                Pose::new(Self::base_rotation(rotation), p)
            }
            Trajectory::Sinusoid {
                position,
                rotation,
                trans_amplitude,
                trans_frequency,
                trans_phase,
                rot_axis,
                rot_amplitude,
                rot_frequency,
            } => {
                let mut p = v3(position);
                for i in 0..3 {
                    p[i] += trans_amplitude[i] * (TAU * trans_frequency[i] * t + trans_phase[i]).sin();
                }
                let axis = v3(rot_axis).normalize();
                let theta = rot_amplitude * (TAU * rot_frequency * t).sin();
                let r = Self::base_rotation(rotation) * rotation_exp(&(axis * theta));
                Pose::new(r, p)
            }
        }
    }

    pub fn linear_velocity(&self, t: f64) -> Vector3<f64> {
        match self {
            Trajectory::Static { .. } => Vector3::zeros(),
            Trajectory::Line { velocity, .. } => v3(velocity),
            Trajectory::Orbit { radius, angular_rate, .. } => {
                let a = angular_rate * t;
                Vector3::new(-radius * angular_rate * a.sin(), radius * angular_rate * a.cos(), 0.0)
            }
            Trajectory::Sinusoid { trans_amplitude, trans_frequency, trans_phase, .. } => {
                let mut v = Vector3::zeros();
                for i in 0..3 {
                    let w = TAU * trans_frequency[i];
                    v[i] = trans_amplitude[i] * w * (w * t + trans_phase[i]).cos();
                }
                v
            }
        }
    }

    pub fn linear_acceleration(&self, t: f64) -> Vector3<f64> {
        match self {
            Trajectory::Static { .. } | Trajectory::Line { .. } => Vector3::zeros(),
            Trajectory::Orbit { center, radius: _, angular_rate, .. } => {
                let p = self.pose(t).translation;
                // centripetal: -w^2 (p - center) in the orbit plane
                let rel = p - v3(center);
                Vector3::new(
                    -angular_rate * angular_rate * rel.x,
                    -angular_rate * angular_rate * rel.y,
                    0.0,
                )
            }
            Trajectory::Sinusoid { trans_amplitude, trans_frequency, trans_phase, .. } => {
                let mut a = Vector3::zeros();
                for i in 0..3 {
                    let w = TAU * trans_frequency[i];
                    a[i] = -trans_amplitude[i] * w * w * (w * t + trans_phase[i]).sin();
                }
                a
            }
        }
    }

    /// Body-frame angular velocity; for rotation about a fixed axis this
    /// coincides with the axis times the angle rate.
    pub fn angular_velocity_body(&self, t: f64) -> Vector3<f64> {
        match self {
            Trajectory::Static { .. } | Trajectory::Line { .. } | Trajectory::Orbit { .. } => {
                Vector3::zeros()
            }
            Trajectory::Sinusoid { rot_axis, rot_amplitude, rot_frequency, .. } => {
                let axis = v3(rot_axis).normalize();
                let w = TAU * rot_frequency;
                axis * (rot_amplitude * w * (w * t).cos())
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Generation

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub duration: f64,
    pub seed: u64,
    /// Gaussian noise standard deviations; zero disables noise.
    pub gyro_noise_std: f64,
    pub accel_noise_std: f64,
    /// Sub-pose renders averaged per frame; 1 disables motion blur.
    pub blur_substeps: usize,
    /// Exposure as a fraction of the frame interval (used when blurring).
    pub exposure_fraction: f64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            duration: 2.0,
            seed: 0,
            gyro_noise_std: 0.0,
            accel_noise_std: 0.0,
            blur_substeps: 1,
            exposure_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionClass {
    Slow,
    Fast,
}

/// Empirical fast-motion rule: peak angular velocity above 1 rad/s or peak
/// linear velocity above 1 m/s (enough to blur a 30 Hz exposure).
pub fn classify_motion(trajectory: &Trajectory, duration: f64) -> MotionClass {
    let mut peak_w: f64 = 0.0;
    let mut peak_v: f64 = 0.0;
    let steps = (duration * 1000.0).ceil() as usize;
    for i in 0..=steps {
        let t = duration * i as f64 / steps.max(1) as f64;
        peak_w = peak_w.max(trajectory.angular_velocity_body(t).norm());
        peak_v = peak_v.max(trajectory.linear_velocity(t).norm());
    }
    if peak_w > 1.0 || peak_v > 1.0 {
        MotionClass::Fast
    } else {
        MotionClass::Slow
    }
}

pub struct SyntheticSequence {
    pub events: Vec<SequenceEvent>,
    pub ground_truth: Vec<TrajectoryEntry>,
    pub motion_class: MotionClass,
}

/// Noise-free IMU signal at an arbitrary time: gyro is body angular velocity,
/// accel is specific force R^T (a_world - g).
pub fn imu_at(trajectory: &Trajectory, gravity: &Vector3<f64>, t: f64) -> (Vector3<f64>, Vector3<f64>) {
    let pose = trajectory.pose(t);
    let gyro = trajectory.angular_velocity_body(t);
    let accel = pose.rotation.transpose() * (trajectory.linear_acceleration(t) - gravity);
    (gyro, accel)
}

/// Render one depth + intensity frame by analytic ray casting from `pose`.
pub fn render_frame(
    scene: &Scene,
    intr: &CameraIntrinsics,
    pose: &Pose,
) -> (Image<f32>, Image<f32>) {
    let mut intensity = Image::new(intr.width, intr.height, 0.0f32);
    let mut depth = Image::new(intr.width, intr.height, 0.0f32);
    for v in 0..intr.height {
        for u in 0..intr.width {
            let dir_cam = Vector3::new(
                (u as f64 - intr.cx) / intr.fx,
                (v as f64 - intr.cy) / intr.fy,
                1.0,
            );
            let dir_world = pose.rotate(&dir_cam);
            if let Some((t, hit, idx)) = scene.raycast(&pose.translation, &dir_world) {
                // dir_cam.z == 1, so the ray parameter equals depth along the
                // optical axis.
                depth.set(u, v, t as f32);
                intensity.set(u, v, scene.objects[idx].texture.intensity(&hit) as f32);
            }
        }
    }
    (intensity, depth)
}

fn render_blurred(
    scene: &Scene,
    intr: &CameraIntrinsics,
    trajectory: &Trajectory,
    t: f64,
    opts: &GenerateOptions,
    camera_interval: f64,
) -> (Image<f32>, Image<f32>) {
    if opts.blur_substeps <= 1 {
        return render_frame(scene, intr, &trajectory.pose(t));
    }
    let exposure = camera_interval * opts.exposure_fraction;
    let n = opts.blur_substeps;
    let mut acc = Image::new(intr.width, intr.height, 0.0f32);
    let mut depth_mid = None;
    for i in 0..n {
        let dt = exposure * (i as f64 / (n - 1) as f64 - 0.5);
        let (inten, dep) = render_frame(scene, intr, &trajectory.pose(t + dt));
        if i == n / 2 {
            depth_mid = Some(dep);
        }
        for (a, b) in acc.data.iter_mut().zip(inten.data.iter()) {
            *a += b / n as f32;
        }
    }
    (acc, depth_mid.expect("midpoint render"))
}

/// Generate an in-memory sequence. Deterministic for a fixed seed.
pub fn generate_sequence(
    scene: &Scene,
    trajectory: &Trajectory,
    config: &SequenceConfig,
    opts: &GenerateOptions,
) -> Result<SyntheticSequence, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let gyro_noise = Normal::new(0.0, opts.gyro_noise_std.max(0.0)).unwrap();
    let accel_noise = Normal::new(0.0, opts.accel_noise_std.max(0.0)).unwrap();

    let camera_interval = 1.0 / config.camera_rate;
    let imu_interval = 1.0 / config.imu_rate;
    let n_frames = (opts.duration * config.camera_rate).round() as usize + 1;
    let n_imu = (opts.duration * config.imu_rate).round() as usize + 1;

    let mut events = Vec::new();
    let mut ground_truth = Vec::new();

    for n in 0..n_imu {
        let t = n as f64 * imu_interval;
        let (gyro, accel) = imu_at(trajectory, &config.gravity_world, t);
        if !(gyro.iter().all(|x| x.is_finite()) && accel.iter().all(|x| x.is_finite())) {
            return Err(SynthError::NonDifferentiableTrajectory(t));
        }
        let noise_g = Vector3::new(
            gyro_noise.sample(&mut rng),
            gyro_noise.sample(&mut rng),
            gyro_noise.sample(&mut rng),
        );
        let noise_a = Vector3::new(
            accel_noise.sample(&mut rng),
            accel_noise.sample(&mut rng),
            accel_noise.sample(&mut rng),
        );
        events.push(SequenceEvent::Imu(ImuSample {
            timestamp: t,
            accel: accel + noise_a,
            gyro: gyro + noise_g,
        }));
    }

    for k in 0..n_frames {
        let t = k as f64 * camera_interval;
        let pose = trajectory.pose(t);
        let (intensity, depth) =
            render_blurred(scene, &config.intrinsics, trajectory, t, opts, camera_interval);
        events.push(SequenceEvent::Frame(Frame::new(t, intensity, depth)));
        ground_truth.push(TrajectoryEntry { timestamp: t, pose });
    }

    // Frames sort before IMU samples at equal timestamps so a frame sees the
    // preceding interval's samples; stable sort keeps IMU order.
    events.sort_by(|a, b| {
        a.timestamp().partial_cmp(&b.timestamp()).unwrap().then_with(|| {
            let rank = |e: &SequenceEvent| match e {
                SequenceEvent::Frame(_) => 0,
                SequenceEvent::Imu(_) => 1,
            };
            rank(a).cmp(&rank(b))
        })
    });

    Ok(SyntheticSequence {
        events,
        ground_truth,
        motion_class: classify_motion(trajectory, opts.duration),
    })
}

/// Write a generated sequence to disk in the TUM layout
/// (rgb.txt/depth.txt/imu.txt/groundtruth.txt plus PNG images).
pub fn write_sequence(
    dir: &Path,
    seq: &SyntheticSequence,
    config: &SequenceConfig,
) -> Result<(), SynthError> {
    use std::io::Write as _;
    std::fs::create_dir_all(dir).map_err(|e| FrameIoError::Io(dir.to_owned(), e))?;
    let mut rgb_idx = String::from("# synthetic sequence\n# timestamp filename\n");
    let mut depth_idx = String::from("# synthetic sequence\n# timestamp filename\n");
    let mut imu = Vec::new();
    let mut frame_no = 0usize;
    for ev in &seq.events {
        match ev {
            SequenceEvent::Imu(s) => imu.push(*s),
            SequenceEvent::Frame(f) => {
                let rgb_name = format!("rgb/{frame_no:05}.png");
                let depth_name = format!("depth/{frame_no:05}.png");
                std::fs::create_dir_all(dir.join("rgb"))
                    .map_err(|e| FrameIoError::Io(dir.to_owned(), e))?;
                std::fs::create_dir_all(dir.join("depth"))
                    .map_err(|e| FrameIoError::Io(dir.to_owned(), e))?;
                tum::save_intensity(&dir.join(&rgb_name), &f.intensity)?;
                tum::save_depth(&dir.join(&depth_name), &f.depth, config.intrinsics.depth_scale)?;
                rgb_idx.push_str(&format!("{:.6} {rgb_name}\n", f.timestamp));
                depth_idx.push_str(&format!("{:.6} {depth_name}\n", f.timestamp));
                frame_no += 1;
            }
        }
    }
    std::fs::write(dir.join("rgb.txt"), rgb_idx).map_err(|e| FrameIoError::Io(dir.to_owned(), e))?;
    std::fs::write(dir.join("depth.txt"), depth_idx)
        .map_err(|e| FrameIoError::Io(dir.to_owned(), e))?;
    tum::write_imu_log(&dir.join("imu.txt"), &imu)?;
    tum::write_trajectory(&dir.join("groundtruth.txt"), &seq.ground_truth)?;

    let meta = format!(
        "motion_class = \"{}\"\n",
        match seq.motion_class {
            MotionClass::Fast => "fast",
            MotionClass::Slow => "slow",
        }
    );
    let mut f = std::fs::File::create(dir.join("metadata.toml"))
        .map_err(|e| FrameIoError::Io(dir.to_owned(), e))?;
    f.write_all(meta.as_bytes()).map_err(|e| FrameIoError::Io(dir.to_owned(), e))?;

    // machine-readable sequence parameters for the loader
    let cfg_file = crate::frame::SequenceConfigFile::from_config(config);
    let toml_text = toml::to_string_pretty(&cfg_file).expect("config serializes");
    std::fs::write(dir.join("sequence.toml"), toml_text)
        .map_err(|e| FrameIoError::Io(dir.to_owned(), e))?;
    Ok(())
}
