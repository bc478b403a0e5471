//! Truncated signed distance volume with weighted-average fusion and
//! ray-marched surface queries.
//!
//! Voxels store a normalized distance in `[-1, 1]` (positive in free space,
//! negative behind the surface) and an observation weight. Depth frames are
//! fused by projecting each voxel center into the camera and averaging the
//! projective signed distance, with the per-voxel weight capped so old
//! observations can still be revised.

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{project, CameraIntrinsics, Pose};
use crate::img::Image;

#[derive(Debug, Error)]
pub enum TsdfError {
    #[error("volume dimensions must be non-zero")]
    EmptyVolume,
}

/// Fusion tunables.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsdfConfig {
    pub voxel_size: f64,
    /// Truncation band in voxels (metric truncation = this * voxel size).
    pub truncation_voxels: f64,
    pub max_weight: f32,
}

impl Default for TsdfConfig {
    fn default() -> Self {
        Self { voxel_size: 0.02, truncation_voxels: 5.0, max_weight: 100.0 }
    }
}

pub struct TsdfVolume {
    pub origin: Vector3<f64>,
    pub voxel_size: f64,
    pub dims: (usize, usize, usize),
    pub truncation: f64,
    max_weight: f32,
    tsdf: Vec<f32>,
    weight: Vec<f32>,
}

impl TsdfVolume {
    pub fn new(
        origin: Vector3<f64>,
        dims: (usize, usize, usize),
        config: &TsdfConfig,
    ) -> Result<Self, TsdfError> {
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(TsdfError::EmptyVolume);
        }
        let n = dims.0 * dims.1 * dims.2;
        Ok(Self {
            origin,
            voxel_size: config.voxel_size,
            dims,
            truncation: config.truncation_voxels * config.voxel_size,
            max_weight: config.max_weight,
            tsdf: vec![1.0; n],
            weight: vec![0.0; n],
        })
    }

    #[inline]
    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims.1 + j) * self.dims.0 + i
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin
            + Vector3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * self.voxel_size
    }

    pub fn tsdf_at(&self, i: usize, j: usize, k: usize) -> f32 {
        self.tsdf[self.index(i, j, k)]
    }

    pub fn weight_at(&self, i: usize, j: usize, k: usize) -> f32 {
        self.weight[self.index(i, j, k)]
    }

    /// Fuse one depth frame taken from `pose` (camera-to-world).
    pub fn integrate(&mut self, depth: &Image<f32>, intr: &CameraIntrinsics, pose: &Pose) {
        let inv = pose.inverse();
        for k in 0..self.dims.2 {
            for j in 0..self.dims.1 {
                for i in 0..self.dims.0 {
                    let p_world = self.voxel_center(i, j, k);
                    let p_cam = inv.transform(&p_world);
                    if p_cam.z <= 0.0 {
                        continue;
                    }
                    let Ok(px) = project(intr, &p_cam) else { continue };
                    let (u, v) = (px.x.round() as i64, px.y.round() as i64);
                    if u < 0 || v < 0 || u >= intr.width as i64 || v >= intr.height as i64 {
                        continue;
                    }
                    let d = *depth.get(u as usize, v as usize) as f64;
                    if d <= 0.0 {
                        continue;
                    }
                    let sdf = d - p_cam.z;
                    if sdf < -self.truncation {
                        // occluded beyond the truncation band: no information
                        continue;
                    }
                    let value = (sdf / self.truncation).clamp(-1.0, 1.0) as f32;
                    let idx = self.index(i, j, k);
                    let w_old = self.weight[idx];
                    let w_new = (w_old + 1.0).min(self.max_weight);
                    self.tsdf[idx] = (self.tsdf[idx] * w_old + value) / (w_old + 1.0);
                    self.weight[idx] = w_new;
                }
            }
        }
    }

    /// Trilinear TSDF sample at a world point; `None` outside the observed
    /// volume or when any contributing voxel is unobserved.
    pub fn sample(&self, p: &Vector3<f64>) -> Option<f64> {
        let g = (p - self.origin) / self.voxel_size - Vector3::new(0.5, 0.5, 0.5);
        let i0 = g.x.floor() as i64;
        let j0 = g.y.floor() as i64;
        let k0 = g.z.floor() as i64;
        if i0 < 0
            || j0 < 0
            || k0 < 0
            || i0 + 1 >= self.dims.0 as i64
            || j0 + 1 >= self.dims.1 as i64
            || k0 + 1 >= self.dims.2 as i64
        {
            return None;
        }
        let (fx, fy, fz) = (g.x - i0 as f64, g.y - j0 as f64, g.z - k0 as f64);
        let mut acc = 0.0;
        for dk in 0..2usize {
            for dj in 0..2usize {
                for di in 0..2usize {
                    let idx =
                        self.index(i0 as usize + di, j0 as usize + dj, k0 as usize + dk);
                    if self.weight[idx] <= 0.0 {
                        return None;
                    }
                    let wx = if di == 0 { 1.0 - fx } else { fx };
                    let wy = if dj == 0 { 1.0 - fy } else { fy };
                    let wz = if dk == 0 { 1.0 - fz } else { fz };
                    acc += wx * wy * wz * self.tsdf[idx] as f64;
                }
            }
        }
        Some(acc)
    }

    /// Surface normal from the central-difference TSDF gradient.
    pub fn normal(&self, p: &Vector3<f64>) -> Option<Vector3<f64>> {
        let h = self.voxel_size;
        let mut grad = Vector3::zeros();
        for a in 0..3 {
            let mut e = Vector3::zeros();
            e[a] = h;
            grad[a] = (self.sample(&(p + e))? - self.sample(&(p - e))?) / (2.0 * h);
        }
        let n = grad.norm();
        (n > 1e-12).then(|| grad / n)
    }

    /// March a world-space ray until the TSDF crosses from positive to
    /// negative; returns the ray parameter of the refined crossing (so for a
    /// unit direction, the metric distance).
    pub fn cast_ray(
        &self,
        origin: &Vector3<f64>,
        direction: &Vector3<f64>,
        max_distance: f64,
    ) -> Option<f64> {
        let dir = direction.normalize();
        let step = self.voxel_size * 0.5;
        let mut t = 0.0;
        let mut prev: Option<(f64, f64)> = None; // (t, tsdf)
        while t < max_distance {
            if let Some(v) = self.sample(&(origin + dir * t)) {
                if let Some((tp, vp)) = prev {
                    if vp > 0.0 && v <= 0.0 {
                        // linear zero crossing between the two samples
                        let alpha = vp / (vp - v);
                        return Some(tp + alpha * (t - tp));
                    }
                }
                prev = Some((t, v));
            } else {
                prev = None;
            }
            t += step;
        }
        None
    }

    /// Ray-cast a virtual depth map from `pose`; invalid pixels are 0.
    pub fn render_depth(&self, intr: &CameraIntrinsics, pose: &Pose, max_distance: f64) -> Image<f32> {
        let mut out = Image::new(intr.width, intr.height, 0.0f32);
        for v in 0..intr.height {
            for u in 0..intr.width {
                let dir_cam = Vector3::new(
                    (u as f64 - intr.cx) / intr.fx,
                    (v as f64 - intr.cy) / intr.fy,
                    1.0,
                );
                let dir_world = pose.rotate(&dir_cam);
                let scale = dir_cam.norm(); // world t per unit optical-axis depth
                if let Some(t) = self.cast_ray(&pose.translation, &dir_world, max_distance * scale)
                {
                    // convert metric ray length back to optical-axis depth
                    out.set(u, v, (t / scale) as f32);
                }
            }
        }
        out
    }

    /// Observed voxel count (weight > 0), mostly for reporting.
    pub fn observed_voxels(&self) -> usize {
        self.weight.iter().filter(|&&w| w > 0.0).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_frame, Primitive, Scene, SceneObject, Texture};

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(80.0, 80.0, 40.0, 30.0, 80, 60)
    }

    fn plane_scene(z: f64) -> Scene {
        Scene {
            objects: vec![SceneObject {
                primitive: Primitive::Plane { point: [0.0, 0.0, z], normal: [0.0, 0.0, -1.0] },
                texture: Texture { base: 128.0, waves: vec![] },
            }],
        }
    }

    fn plane_volume() -> TsdfVolume {
        // volume around the z = 1 wall, in front of an identity camera
        TsdfVolume::new(
            Vector3::new(-0.6, -0.5, 0.7),
            (60, 50, 30),
            &TsdfConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn empty_volume_is_an_error() {
        assert!(TsdfVolume::new(Vector3::zeros(), (0, 4, 4), &TsdfConfig::default()).is_err());
    }

    #[test]
    fn integrated_plane_has_zero_crossing_at_surface() {
        let scene = plane_scene(1.0);
        let (_, depth) = render_frame(&scene, &intr(), &Pose::identity());
        let mut vol = plane_volume();
        vol.integrate(&depth, &intr(), &Pose::identity());
        // sample along the optical axis: positive in front, negative behind
        let front = vol.sample(&Vector3::new(0.0, 0.0, 0.95)).unwrap();
        let behind = vol.sample(&Vector3::new(0.0, 0.0, 1.05)).unwrap();
        assert!(front > 0.0, "front {front}");
        assert!(behind < 0.0, "behind {behind}");
        // near-surface sample is close to zero
        let at = vol.sample(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert!(at.abs() < 0.3, "at-surface tsdf {at}");
    }

    #[test]
    fn cast_ray_recovers_plane_depth() {
        let scene = plane_scene(1.0);
        let (_, depth) = render_frame(&scene, &intr(), &Pose::identity());
        let mut vol = plane_volume();
        vol.integrate(&depth, &intr(), &Pose::identity());
        let t = vol
            .cast_ray(&Vector3::zeros(), &Vector3::new(0.0, 0.0, 1.0), 3.0)
            .unwrap();
        assert!((t - 1.0).abs() < vol.voxel_size, "ray depth {t}");
        // normal near the crossing points back toward the camera side
        let n = vol.normal(&Vector3::new(0.0, 0.0, t)).unwrap();
        assert!((n.z.abs() - 1.0).abs() < 0.1, "normal {n:?}");
    }

    #[test]
    fn render_depth_matches_sensor_depth() {
        let scene = plane_scene(1.0);
        let (_, depth) = render_frame(&scene, &intr(), &Pose::identity());
        let mut vol = plane_volume();
        vol.integrate(&depth, &intr(), &Pose::identity());
        let model = vol.render_depth(&intr(), &Pose::identity(), 3.0);
        let mut worst = 0.0f64;
        let mut compared = 0;
        for v in 10..50 {
            for u in 10..70 {
                let m = *model.get(u, v) as f64;
                if m <= 0.0 {
                    continue;
                }
                compared += 1;
                worst = worst.max((m - *depth.get(u, v) as f64).abs());
            }
        }
        assert!(compared > 1000, "too few rendered pixels: {compared}");
        assert!(worst < 2.0 * vol.voxel_size, "worst model-vs-sensor depth {worst}");
    }

    #[test]
    fn weight_caps_and_fusion_averages() {
        let scene = plane_scene(1.0);
        let (_, depth) = render_frame(&scene, &intr(), &Pose::identity());
        let cfg = TsdfConfig { max_weight: 3.0, ..Default::default() };
        let mut vol =
            TsdfVolume::new(Vector3::new(-0.6, -0.5, 0.7), (60, 50, 30), &cfg).unwrap();
        for _ in 0..10 {
            vol.integrate(&depth, &intr(), &Pose::identity());
        }
        let mut max_w = 0.0f32;
        for k in 0..vol.dims.2 {
            for j in 0..vol.dims.1 {
                for i in 0..vol.dims.0 {
                    max_w = max_w.max(vol.weight_at(i, j, k));
                }
            }
        }
        assert!(max_w <= 3.0 + 1e-6);
        assert!(vol.observed_voxels() > 0);
    }

    #[test]
    fn two_view_sphere_fusion_is_consistent() {
        let scene = Scene {
            objects: vec![SceneObject {
                primitive: Primitive::Sphere { center: [0.0, 0.0, 1.0], radius: 0.3 },
                texture: Texture { base: 128.0, waves: vec![] },
            }],
        };
        let mut vol = TsdfVolume::new(
            Vector3::new(-0.45, -0.45, 0.55),
            (45, 45, 45),
            &TsdfConfig::default(),
        )
        .unwrap();
        // front view and a 30-degree side view
        let pose0 = Pose::identity();
        let ang: f64 = 0.5;
        let rot = crate::geometry::rotation_exp(&Vector3::new(0.0, ang, 0.0));
        // orbit pose looking at the sphere center
        let center = Vector3::new(0.0, 0.0, 1.0);
        let cam_pos = center + rot * (Vector3::new(0.0, 0.0, -1.0));
        let pose1 = Pose::new(rot, cam_pos);
        for pose in [&pose0, &pose1] {
            let (_, depth) = render_frame(&scene, &intr(), pose);
            vol.integrate(&depth, &intr(), pose);
        }
        // surface points recovered by ray casting lie on the sphere
        let mut checked = 0;
        for &(dx, dy) in &[(0.0, 0.0), (0.1, 0.0), (0.0, 0.1), (-0.1, 0.05)] {
            let dir = Vector3::new(dx, dy, 1.0);
            if let Some(t) = vol.cast_ray(&Vector3::zeros(), &dir, 2.0) {
                let p = dir.normalize() * t;
                let err = ((p - center).norm() - 0.3).abs();
                assert!(err < 1.5 * vol.voxel_size, "sphere surface error {err}");
                checked += 1;
            }
        }
        assert!(checked >= 3);
    }
}
