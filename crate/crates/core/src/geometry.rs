//! Camera model, rigid-body transforms and depth-image geometry.
//!
//! World/camera conventions: a [`Pose`] maps points from the camera frame to
//! the world frame. Depth images store metric depth along the optical axis,
//! with 0 marking invalid pixels.

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::img::Image;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("point depth {0} is not positive")]
    NonPositiveDepth(f64),
    #[error("depth {0} is not a positive finite value")]
    InvalidDepth(f64),
}

/// Pinhole camera parameters (images assumed rectified).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Integer depth-image units per meter (TUM default 5000).
    pub depth_scale: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        assert!(fx > 0.0 && fy > 0.0);
        assert!(cx >= 0.0 && cx < width as f64);
        assert!(cy >= 0.0 && cy < height as f64);
        Self { fx, fy, cx, cy, width, height, depth_scale: 5000.0 }
    }

    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }
}

/// Rigid transform from camera to world: `p_world = R * p_cam + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Error-state increment: `R' = Exp(dtheta) R`, `t' = t + dt` (the
    /// left-multiplicative SO(3) x R^3 convention used throughout the filter).
    pub fn boxplus(&self, dtheta: &Vector3<f64>, dt: &Vector3<f64>) -> Pose {
        Pose {
            rotation: rotation_exp(dtheta) * self.rotation,
            translation: self.translation + dt,
        }
    }

    /// Inverse of [`Self::boxplus`]: the `(dtheta, dt)` with
    /// `other.boxplus(dtheta, dt) == self`.
    pub fn boxminus(&self, other: &Pose) -> (Vector3<f64>, Vector3<f64>) {
        (
            rotation_log(&(self.rotation * other.rotation.transpose())),
            self.translation - other.translation,
        )
    }

    /// Deviation of R from an orthonormal, right-handed rotation.
    pub fn orthonormality_error(&self) -> f64 {
        let e = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        let d = (self.rotation.determinant() - 1.0).abs();
        e.max(d)
    }

    /// Re-projects R onto SO(3); counters drift from long products.
    pub fn orthonormalized(&self) -> Pose {
        let svd = self.rotation.svd(true, true);
        let u = svd.u.unwrap();
        let vt = svd.v_t.unwrap();
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * vt;
        }
        Pose { rotation: r, translation: self.translation }
    }
}

/// Tangent-space increment: rotation (rad) and translation (m) handled
/// independently (SO(3) x R^3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub rotational: Vector3<f64>,
    pub translational: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Self { rotational: Vector3::zeros(), translational: Vector3::zeros() }
    }

    pub fn new(rotational: Vector3<f64>, translational: Vector3<f64>) -> Self {
        Self { rotational, translational }
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues formula, with the small-angle series below 1e-10 rad.
pub fn rotation_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = skew(w);
    if theta < 1e-10 {
        Matrix3::identity() + k + 0.5 * k * k
    } else {
        Matrix3::identity() + (theta.sin() / theta) * k
            + ((1.0 - theta.cos()) / (theta * theta)) * k * k
    }
}

/// Inverse of [`rotation_exp`]; returns the axis-angle vector with angle in [0, pi].
pub fn rotation_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let axis_raw = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if theta < 1e-10 {
        return 0.5 * axis_raw;
    }
    if (std::f64::consts::PI - theta) < 1e-6 {
        // Near pi the off-diagonal difference degenerates; recover the axis
        // from the symmetric part.
        let a = r + Matrix3::identity();
        let col = (0..3).max_by(|&i, &j| {
            a.column(i).norm().partial_cmp(&a.column(j).norm()).unwrap()
        }).unwrap();
        let mut axis = a.column(col).into_owned();
        axis /= axis.norm();
        // Fix the sign so Exp(axis * theta) reproduces r.
        if (axis_raw.dot(&axis)) < 0.0 {
            axis = -axis;
        }
        return axis * theta;
    }
    axis_raw * (theta / (2.0 * theta.sin()))
}

/// SO(3) x R^3 exponential: rotation via Rodrigues, translation passed through.
pub fn exp_map(twist: &Twist) -> Pose {
    Pose { rotation: rotation_exp(&twist.rotational), translation: twist.translational }
}

/// Project a camera-frame point onto the image plane.
pub fn project(intr: &CameraIntrinsics, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
    if p.z <= 0.0 {
        return Err(GeometryError::NonPositiveDepth(p.z));
    }
    Ok(Vector2::new(intr.fx * p.x / p.z + intr.cx, intr.fy * p.y / p.z + intr.cy))
}

/// Lift a pixel with known depth back into the camera frame.
pub fn unproject(
    intr: &CameraIntrinsics,
    px: &Vector2<f64>,
    depth: f64,
) -> Result<Vector3<f64>, GeometryError> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(GeometryError::InvalidDepth(depth));
    }
    Ok(Vector3::new(
        (px.x - intr.cx) * depth / intr.fx,
        (px.y - intr.cy) * depth / intr.fy,
        depth,
    ))
}

/// Per-pixel normals of a depth image, camera frame, oriented toward the camera.
///
/// Central differences of back-projected neighbors; a pixel is invalid when it
/// or any 4-neighbor has no depth.
pub struct NormalMap {
    pub normals: Image<Vector3<f64>>,
    pub valid: Image<bool>,
}

impl NormalMap {
    pub fn get(&self, x: usize, y: usize) -> Option<Vector3<f64>> {
        if *self.valid.get(x, y) { Some(*self.normals.get(x, y)) } else { None }
    }
}

pub fn compute_normals(depth: &Image<f32>, intr: &CameraIntrinsics) -> NormalMap {
    assert_eq!(depth.width, intr.width);
    assert_eq!(depth.height, intr.height);
    let mut normals = Image::new(depth.width, depth.height, Vector3::zeros());
    let mut valid = Image::new(depth.width, depth.height, false);

    let point_at = |x: usize, y: usize| -> Option<Vector3<f64>> {
        let d = *depth.get(x, y) as f64;
        if d <= 0.0 {
            return None;
        }
        unproject(intr, &Vector2::new(x as f64, y as f64), d).ok()
    };

    for y in 1..depth.height.saturating_sub(1) {
        for x in 1..depth.width.saturating_sub(1) {
            let (Some(c), Some(px0), Some(px1), Some(py0), Some(py1)) = (
                point_at(x, y),
                point_at(x - 1, y),
                point_at(x + 1, y),
                point_at(x, y - 1),
                point_at(x, y + 1),
            ) else {
                continue;
            };
            let tx = px1 - px0;
            let ty = py1 - py0;
            let mut n = tx.cross(&ty);
            let norm = n.norm();
            if norm < 1e-12 {
                continue;
            }
            n /= norm;
            if n.dot(&c) > 0.0 {
                n = -n;
            }
            normals.set(x, y, n);
            valid.set(x, y, true);
        }
    }
    NormalMap { normals, valid }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn test_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480)
    }

    fn random_rotation(rng: &mut StdRng) -> Matrix3<f64> {
        let w = Vector3::new(
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
        );
        rotation_exp(&w)
    }

    #[test]
    fn project_principal_point() {
        let intr = test_intrinsics();
        let px = project(&intr, &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(px, Vector2::new(320.0, 240.0));
    }

    #[test]
    fn project_off_axis() {
        let intr = test_intrinsics();
        let px = project(&intr, &Vector3::new(1.0, 0.0, 2.0)).unwrap();
        assert_eq!(px, Vector2::new(570.0, 240.0));
    }

    #[test]
    fn project_rejects_nonpositive_depth() {
        let intr = test_intrinsics();
        assert!(matches!(
            project(&intr, &Vector3::new(0.0, 0.0, 0.0)),
            Err(GeometryError::NonPositiveDepth(_))
        ));
    }

    #[test]
    fn unproject_examples() {
        let intr = test_intrinsics();
        let p = unproject(&intr, &Vector2::new(320.0, 240.0), 2.0).unwrap();
        assert_relative_eq!(p, Vector3::new(0.0, 0.0, 2.0), epsilon = 1e-12);
        let p = unproject(&intr, &Vector2::new(570.0, 240.0), 2.0).unwrap();
        assert_relative_eq!(p, Vector3::new(1.0, 0.0, 2.0), epsilon = 1e-12);
        assert!(unproject(&intr, &Vector2::new(0.0, 0.0), 0.0).is_err());
    }

    #[test]
    fn project_unproject_round_trip_random() {
        let intr = test_intrinsics();
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..200 {
            let p = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.1..5.0),
            );
            let px = project(&intr, &p).unwrap();
            let q = unproject(&intr, &px, p.z).unwrap();
            assert_relative_eq!(p, q, epsilon = 1e-9);
        }
    }

    #[test]
    fn unproject_project_identity_all_pixels() {
        // Exhaustive sweep over a small image.
        let intr = CameraIntrinsics::new(40.0, 45.0, 16.0, 12.0, 32, 24);
        for y in 0..24 {
            for x in 0..32 {
                let px = Vector2::new(x as f64, y as f64);
                let p = unproject(&intr, &px, 1.7).unwrap();
                let back = project(&intr, &p).unwrap();
                assert_relative_eq!(px, back, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn exp_map_zero_is_identity() {
        let pose = exp_map(&Twist::zero());
        assert_eq!(pose.rotation, Matrix3::identity());
        assert_eq!(pose.translation, Vector3::zeros());
    }

    #[test]
    fn exp_map_quarter_turn_about_x() {
        let pose = exp_map(&Twist::new(
            Vector3::new(std::f64::consts::FRAC_PI_2, 0.0, 0.0),
            Vector3::zeros(),
        ));
        let v = pose.rotate(&Vector3::new(0.0, 1.0, 0.0));
        assert_relative_eq!(v, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
    }

    /// 20-term matrix-exponential series, the independent oracle for Rodrigues.
    fn matrix_exp_series(w: &Vector3<f64>) -> Matrix3<f64> {
        let k = skew(w);
        let mut term = Matrix3::identity();
        let mut sum = Matrix3::identity();
        for n in 1..=20 {
            term = term * k / n as f64;
            sum += term;
        }
        sum
    }

    #[test]
    fn exp_map_matches_series_oracle() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..100 {
            let w = Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
            let r = rotation_exp(&w);
            let oracle = matrix_exp_series(&w);
            assert!((r - oracle).abs().max() < 1e-10, "w = {w:?}");
        }
    }

    #[test]
    fn exp_map_inverse_composition() {
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..100 {
            let t = Twist::new(
                Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)),
                Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)),
            );
            let neg = Twist::new(-t.rotational, -t.translational);
            let r = rotation_exp(&t.rotational) * rotation_exp(&neg.rotational);
            assert!((r - Matrix3::identity()).abs().max() < 1e-10);
        }
    }

    #[test]
    fn rotation_log_round_trip() {
        let mut rng = StdRng::seed_from_u64(17);
        for _ in 0..200 {
            let w = Vector3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let r = rotation_exp(&w);
            let back = rotation_exp(&rotation_log(&r));
            assert!((r - back).abs().max() < 1e-8, "w = {w:?}");
        }
    }

    #[test]
    fn compose_inverse_identity() {
        let mut rng = StdRng::seed_from_u64(19);
        for _ in 0..50 {
            let a = Pose::new(
                random_rotation(&mut rng),
                Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)),
            );
            let id = a.compose(&a.inverse());
            assert!((id.rotation - Matrix3::identity()).abs().max() < 1e-12);
            assert!(id.translation.norm() < 1e-12);
        }
    }

    #[test]
    fn compose_identity_is_neutral() {
        let b = Pose::new(rotation_exp(&Vector3::new(0.3, -0.2, 0.9)), Vector3::new(1.0, 2.0, 3.0));
        let c = Pose::identity().compose(&b);
        assert_eq!(b, c);
    }

    #[test]
    fn compose_associativity_random() {
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..50 {
            let mk = |rng: &mut StdRng| {
                Pose::new(
                    random_rotation(rng),
                    Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)),
                )
            };
            let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            assert!((l.rotation - r.rotation).abs().max() < 1e-12);
            assert!((l.translation - r.translation).norm() < 1e-12);
        }
    }

    #[test]
    fn normals_fronto_parallel_plane() {
        let intr = CameraIntrinsics::new(50.0, 50.0, 32.0, 24.0, 64, 48);
        let depth = Image::new(64, 48, 2.0f32);
        let nm = compute_normals(&depth, &intr);
        for y in 1..47 {
            for x in 1..63 {
                let n = nm.get(x, y).expect("interior normal valid");
                assert_relative_eq!(n, Vector3::new(0.0, 0.0, -1.0), epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn normals_tilted_plane_matches_analytic() {
        // Plane z = 2 + x (45 degrees about the y axis); analytic unit normal
        // facing the camera is (1, 0, -1)/sqrt(2).
        let intr = CameraIntrinsics::new(100.0, 100.0, 32.0, 24.0, 64, 48);
        let mut depth = Image::new(64, 48, 0.0f32);
        for y in 0..48 {
            for x in 0..64 {
                // x_cam = (u - cx) z / fx, z = 2 + x_cam => z = 2 / (1 - (u-cx)/fx)
                let a = (x as f64 - intr.cx) / intr.fx;
                depth.set(x, y, (2.0 / (1.0 - a)) as f32);
            }
        }
        let nm = compute_normals(&depth, &intr);
        let expected = Vector3::new(1.0, 0.0, -1.0) / 2.0f64.sqrt();
        for y in 1..47 {
            for x in 1..63 {
                let n = nm.get(x, y).expect("valid");
                assert!((n - expected).norm() < 1e-3, "at ({x},{y}): {n:?}");
            }
        }
    }

    #[test]
    fn normals_hole_neighbors_invalid() {
        let intr = CameraIntrinsics::new(50.0, 50.0, 16.0, 12.0, 32, 24);
        let mut depth = Image::new(32, 24, 2.0f32);
        depth.set(10, 10, 0.0);
        let nm = compute_normals(&depth, &intr);
        assert!(nm.get(10, 10).is_none());
        assert!(nm.get(9, 10).is_none());
        assert!(nm.get(11, 10).is_none());
        assert!(nm.get(10, 9).is_none());
        assert!(nm.get(10, 11).is_none());
        assert!(nm.get(12, 10).is_some());
    }

    #[test]
    fn normals_unit_length_where_valid() {
        let intr = CameraIntrinsics::new(80.0, 80.0, 32.0, 24.0, 64, 48);
        let mut depth = Image::new(64, 48, 0.0f32);
        let mut rng = StdRng::seed_from_u64(29);
        for y in 0..48 {
            for x in 0..64 {
                depth.set(x, y, rng.gen_range(1.0..3.0));
            }
        }
        let nm = compute_normals(&depth, &intr);
        for y in 0..48 {
            for x in 0..64 {
                if let Some(n) = nm.get(x, y) {
                    assert!((n.norm() - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}
