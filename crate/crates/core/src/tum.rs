//! TUM RGB-D sequence layout: `rgb.txt` / `depth.txt` index files, 16-bit PNG
//! depth, a whitespace IMU log and TUM-format trajectory files.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

use crate::frame::{Frame, ImuSample, SequenceConfig, SequenceEvent};
use crate::geometry::Pose;
use crate::img::Image;

/// Depth/RGB association window, seconds (standard TUM tooling default).
pub const ASSOCIATION_WINDOW: f64 = 0.020;

#[derive(Debug, Error)]
pub enum FrameIoError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("{file}:{line}: malformed line")]
    MalformedLine { file: PathBuf, line: usize },
    #[error("failed to decode image {0}: {1}")]
    ImageDecode(PathBuf, String),
    #[error("io error on {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("timestamps not strictly increasing in {0}")]
    NonMonotonic(PathBuf),
}

fn read_index(path: &Path) -> Result<Vec<(f64, String)>, FrameIoError> {
    let file = fs::File::open(path).map_err(|_| FrameIoError::MissingFile(path.to_owned()))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| FrameIoError::Io(path.to_owned(), e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(ts), Some(name)) = (it.next(), it.next()) else {
            return Err(FrameIoError::MalformedLine { file: path.to_owned(), line: lineno + 1 });
        };
        let ts: f64 = ts
            .parse()
            .map_err(|_| FrameIoError::MalformedLine { file: path.to_owned(), line: lineno + 1 })?;
        out.push((ts, name.to_string()));
    }
    Ok(out)
}

fn parse_floats(path: &Path, expect: usize) -> Result<Vec<Vec<f64>>, FrameIoError> {
    let file = fs::File::open(path).map_err(|_| FrameIoError::MissingFile(path.to_owned()))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| FrameIoError::Io(path.to_owned(), e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
        let vals = vals
            .map_err(|_| FrameIoError::MalformedLine { file: path.to_owned(), line: lineno + 1 })?;
        if vals.len() != expect {
            return Err(FrameIoError::MalformedLine { file: path.to_owned(), line: lineno + 1 });
        }
        out.push(vals);
    }
    Ok(out)
}

/// Load a grayscale intensity image (Rec.601 luminance for color input).
pub fn load_intensity(path: &Path) -> Result<Image<f32>, FrameIoError> {
    let img = image::open(path)
        .map_err(|e| FrameIoError::ImageDecode(path.to_owned(), e.to_string()))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Image::new(w, h, 0.0f32);
    for (x, y, p) in img.enumerate_pixels() {
        let lum = 0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32;
        out.set(x as usize, y as usize, lum);
    }
    Ok(out)
}

/// Load a 16-bit PNG depth image, scaling integer units to meters.
pub fn load_depth(path: &Path, depth_scale: f64) -> Result<Image<f32>, FrameIoError> {
    let img = image::open(path)
        .map_err(|e| FrameIoError::ImageDecode(path.to_owned(), e.to_string()))?
        .into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Image::new(w, h, 0.0f32);
    for (x, y, p) in img.enumerate_pixels() {
        out.set(x as usize, y as usize, (p[0] as f64 / depth_scale) as f32);
    }
    Ok(out)
}

pub fn save_intensity(path: &Path, img: &Image<f32>) -> Result<(), FrameIoError> {
    let mut buf = image::GrayImage::new(img.width as u32, img.height as u32);
    for y in 0..img.height {
        for x in 0..img.width {
            buf.put_pixel(x as u32, y as u32, image::Luma([img.get(x, y).round().clamp(0.0, 255.0) as u8]));
        }
    }
    buf.save(path).map_err(|e| FrameIoError::ImageDecode(path.to_owned(), e.to_string()))
}

pub fn save_depth(path: &Path, img: &Image<f32>, depth_scale: f64) -> Result<(), FrameIoError> {
    let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
        img.width as u32,
        img.height as u32,
    );
    for y in 0..img.height {
        for x in 0..img.width {
            let v = (*img.get(x, y) as f64 * depth_scale).round().clamp(0.0, 65535.0) as u16;
            buf.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    buf.save(path).map_err(|e| FrameIoError::ImageDecode(path.to_owned(), e.to_string()))
}

/// Parsed-but-not-yet-decoded sequence: image paths plus IMU samples.
#[derive(Debug)]
pub struct TumSequence {
    dir: PathBuf,
    depth_scale: f64,
    /// (timestamp, rgb path, depth path)
    pairs: Vec<(f64, String, String)>,
    imu: Vec<ImuSample>,
}

impl TumSequence {
    /// Index a sequence directory. Associates rgb/depth by nearest timestamp
    /// within [`ASSOCIATION_WINDOW`]; unmatched color frames are dropped with
    /// a warning.
    pub fn open(dir: &Path, config: &SequenceConfig) -> Result<Self, FrameIoError> {
        let rgb = read_index(&dir.join("rgb.txt"))?;
        let depth = read_index(&dir.join("depth.txt"))?;
        for (name, list) in [("rgb.txt", &rgb), ("depth.txt", &depth)] {
            if list.windows(2).any(|w| w[1].0 <= w[0].0) {
                return Err(FrameIoError::NonMonotonic(dir.join(name)));
            }
        }

        let mut pairs = Vec::new();
        for (ts, rgb_name) in &rgb {
            // depth list is sorted; nearest by timestamp
            let idx = depth.partition_point(|(dts, _)| dts < ts);
            let mut best: Option<(f64, &str)> = None;
            for cand in idx.saturating_sub(1)..(idx + 1).min(depth.len()) {
                let (dts, dname) = &depth[cand];
                let err = (dts - ts).abs();
                if best.map_or(true, |(berr, _)| err < berr) {
                    best = Some((err, dname));
                }
            }
            match best {
                Some((err, dname)) if err <= ASSOCIATION_WINDOW => {
                    pairs.push((*ts, rgb_name.clone(), dname.to_string()));
                }
                _ => {
                    log::warn!("no depth association for rgb frame at t={ts:.6}; dropped");
                }
            }
        }

        let imu = Self::load_imu(dir)?;
        Ok(Self { dir: dir.to_owned(), depth_scale: config.intrinsics.depth_scale, pairs, imu })
    }

    fn load_imu(dir: &Path) -> Result<Vec<ImuSample>, FrameIoError> {
        let combined = dir.join("imu.txt");
        let samples: Vec<ImuSample> = if combined.exists() {
            parse_floats(&combined, 7)?
                .into_iter()
                .map(|v| ImuSample {
                    timestamp: v[0],
                    accel: Vector3::new(v[1], v[2], v[3]),
                    gyro: Vector3::new(v[4], v[5], v[6]),
                })
                .collect()
        } else if !dir.join("accelerometer.txt").exists() {
            // Vision-only dataset; the tracker falls back to its motion prior.
            Vec::new()
        } else {
            // Separate accelerometer/gyroscope logs, associated by nearest
            // gyro timestamp to each accel sample.
            let accel = parse_floats(&dir.join("accelerometer.txt"), 4)?;
            let gyro = parse_floats(&dir.join("gyroscope.txt"), 4)?;
            accel
                .iter()
                .map(|a| {
                    let g = gyro
                        .iter()
                        .min_by(|x, y| {
                            (x[0] - a[0]).abs().partial_cmp(&(y[0] - a[0]).abs()).unwrap()
                        })
                        .expect("gyroscope.txt parsed non-empty");
                    ImuSample {
                        timestamp: a[0],
                        accel: Vector3::new(a[1], a[2], a[3]),
                        gyro: Vector3::new(g[1], g[2], g[3]),
                    }
                })
                .collect()
        };
        if samples.windows(2).any(|w| w[1].timestamp <= w[0].timestamp) {
            return Err(FrameIoError::NonMonotonic(dir.join("imu.txt")));
        }
        Ok(samples)
    }

    pub fn frame_count(&self) -> usize {
        self.pairs.len()
    }

    /// Merge frames and IMU samples into one time-ordered event stream,
    /// decoding images lazily.
    pub fn events(&self) -> impl Iterator<Item = Result<SequenceEvent, FrameIoError>> + '_ {
        TumEventIter { seq: self, frame_idx: 0, imu_idx: 0 }
    }
}

struct TumEventIter<'a> {
    seq: &'a TumSequence,
    frame_idx: usize,
    imu_idx: usize,
}

impl<'a> Iterator for TumEventIter<'a> {
    type Item = Result<SequenceEvent, FrameIoError>;

    fn next(&mut self) -> Option<Self::Item> {
        let next_frame_ts = self.seq.pairs.get(self.frame_idx).map(|p| p.0);
        let next_imu_ts = self.seq.imu.get(self.imu_idx).map(|s| s.timestamp);
        match (next_frame_ts, next_imu_ts) {
            (None, None) => None,
            (Some(_), Some(its)) if its <= next_frame_ts.unwrap() => {
                let s = self.seq.imu[self.imu_idx];
                self.imu_idx += 1;
                Some(Ok(SequenceEvent::Imu(s)))
            }
            (None, Some(_)) => {
                let s = self.seq.imu[self.imu_idx];
                self.imu_idx += 1;
                Some(Ok(SequenceEvent::Imu(s)))
            }
            (Some(ts), _) => {
                let (_, rgb_name, depth_name) = &self.seq.pairs[self.frame_idx];
                self.frame_idx += 1;
                let intensity = match load_intensity(&self.seq.dir.join(rgb_name)) {
                    Ok(i) => i,
                    Err(e) => return Some(Err(e)),
                };
                let depth = match load_depth(&self.seq.dir.join(depth_name), self.seq.depth_scale) {
                    Ok(d) => d,
                    Err(e) => return Some(Err(e)),
                };
                Some(Ok(SequenceEvent::Frame(Frame::new(ts, intensity, depth))))
            }
        }
    }
}

/// One line of a TUM trajectory: pose as translation + unit quaternion.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryEntry {
    pub timestamp: f64,
    pub pose: Pose,
}

pub fn pose_to_tum_line(ts: f64, pose: &Pose) -> String {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(pose.rotation));
    let t = pose.translation;
    format!(
        "{ts:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
        t.x, t.y, t.z, q.i, q.j, q.k, q.w
    )
}

pub fn write_trajectory(path: &Path, entries: &[TrajectoryEntry]) -> Result<(), FrameIoError> {
    let mut file = fs::File::create(path).map_err(|e| FrameIoError::Io(path.to_owned(), e))?;
    for e in entries {
        writeln!(file, "{}", pose_to_tum_line(e.timestamp, &e.pose))
            .map_err(|err| FrameIoError::Io(path.to_owned(), err))?;
    }
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryEntry>, FrameIoError> {
    let rows = parse_floats(path, 8)?;
    Ok(rows
        .into_iter()
        .map(|v| {
            let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(v[7], v[4], v[5], v[6]));
            TrajectoryEntry {
                timestamp: v[0],
                pose: Pose::new(
                    q.to_rotation_matrix().into_inner(),
                    Vector3::new(v[1], v[2], v[3]),
                ),
            }
        })
        .collect())
}

pub fn write_imu_log(path: &Path, samples: &[ImuSample]) -> Result<(), FrameIoError> {
    let mut file = fs::File::create(path).map_err(|e| FrameIoError::Io(path.to_owned(), e))?;
    for s in samples {
        writeln!(
            file,
            "{:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            s.timestamp, s.accel.x, s.accel.y, s.accel.z, s.gyro.x, s.gyro.y, s.gyro.z
        )
        .map_err(|e| FrameIoError::Io(path.to_owned(), e))?;
    }
    Ok(())
}

/// Used by tests and examples; rotation matrices survive the quaternion
/// round trip only approximately, hence the helper.
pub fn rotation_close(a: &Matrix3<f64>, b: &Matrix3<f64>, tol: f64) -> bool {
    (a - b).abs().max() < tol
}

pub fn pixel(u: usize, v: usize) -> Vector2<f64> {
    Vector2::new(u as f64, v as f64)
}
