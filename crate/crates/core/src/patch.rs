//! Geometry-aware deformable patch features.
//!
//! A patch is a small image window carrying per-pixel depth and normals. It
//! is lifted to world coordinates with the pose of its source frame, and
//! re-projected pixel-by-pixel into the current camera to obtain its deformed
//! footprint. Occlusions inside the patch shrink the footprint; disocclusions
//! extend it (the SE effect). Tracking minimizes a joint photometric +
//! point-to-plane objective over the deformed footprint.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix2x3, RowVector3, Vector2, Vector3};
use thiserror::Error;

use crate::fast;
use crate::frame::Frame;
use crate::geometry::{project, unproject, CameraIntrinsics, NormalMap, Pose};

#[derive(Debug, Error, PartialEq)]
pub enum PatchError {
    #[error("patch has no valid-depth pixels")]
    NoValidPixels,
    #[error("patch lost: too few pixels survive projection into the image")]
    PatchLost,
    #[error("no residuals: every patch was lost")]
    NoResiduals,
}

/// Tunables for extraction and tracking.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    pub patch_size: usize,
    pub max_patches: usize,
    pub fast_threshold: f64,
    pub nms_spacing: f64,
    pub min_valid_fraction: f64,
    /// A patch is lost when fewer than this fraction of its pixels survive
    /// deformation inside the image.
    pub min_survivor_fraction: f64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            patch_size: 10,
            max_patches: 100,
            fast_threshold: 20.0,
            nms_spacing: 16.0,
            min_valid_fraction: 0.6,
            min_survivor_fraction: 0.25,
        }
    }
}

impl PatchConfig {
    /// Window offsets covering a size x size block roughly centered on the
    /// anchor (for size 10: -4..=5).
    pub fn offsets(&self) -> impl Iterator<Item = (i32, i32)> + '_ {
        let lo = -(self.patch_size as i32 / 2) + 1;
        let hi = self.patch_size as i32 / 2;
        (lo..=hi).flat_map(move |dy| (lo..=hi).map(move |dx| (dx, dy)))
    }

    pub fn border(&self) -> usize {
        self.patch_size / 2 + 1
    }
}

/// One pixel of a patch in its source frame.
#[derive(Debug, Clone, Copy)]
pub struct PatchPixel {
    pub pixel: Vector2<f64>,
    pub intensity: f64,
    pub depth: f64,
    pub normal: Vector3<f64>,
    pub valid_depth: bool,
}

/// An extracted feature patch, anchored in its source frame.
#[derive(Debug, Clone)]
pub struct Patch {
    pub id: u64,
    pub anchor: Vector2<f64>,
    pub pixels: Vec<PatchPixel>,
    pub source_frame: usize,
    /// Running (EMA) average intensity error, gray levels.
    pub quality: f64,
}

/// Patch lifted to world coordinates (valid-depth pixels only).
#[derive(Debug, Clone)]
pub struct WorldPatch {
    pub points: Vec<Vector3<f64>>,
    pub intensities: Vec<f64>,
    pub normals: Vec<Vector3<f64>>,
    /// Source-frame pixel coordinates, parallel to `points`.
    pub source_pixels: Vec<Vector2<f64>>,
    /// Index into `points` of the pixel closest to the patch anchor.
    pub anchor_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeStatus {
    None,
    Shrink,
    Extend,
    Both,
}

/// Result of projecting a world patch into the current camera.
#[derive(Debug, Clone)]
pub struct DeformedPatch {
    /// Projected sub-pixel coordinate per world point; None when the point
    /// falls behind the camera.
    pub projected: Vec<Option<Vector2<f64>>>,
    /// Current-camera depth per world point, parallel to `projected`.
    pub camera_depth: Vec<f64>,
    /// Indices (into the world patch) that survive occlusion removal and
    /// land inside the image.
    pub surviving: Vec<usize>,
    pub se_status: SeStatus,
    /// Inclusive integer bounding box (min_x, min_y, max_x, max_y) of the
    /// surviving rounded pixels.
    pub bbox: (i64, i64, i64, i64),
}

// ---------------------------------------------------------------------------
// Extraction

/// FAST-corner seeded patch extraction with spacing against existing anchors
/// and a valid-depth admission test.
pub fn extract_patches(
    frame: &Frame,
    normals: &NormalMap,
    existing_anchors: &[Vector2<f64>],
    budget: usize,
    config: &PatchConfig,
    source_frame: usize,
    next_id: &mut u64,
) -> Vec<Patch> {
    if budget == 0 {
        return Vec::new();
    }
    let corners = fast::detect(&frame.intensity, config.fast_threshold, config.border());
    let window = config.patch_size * config.patch_size;
    let mut patches = Vec::new();
    // NMS first against existing anchors, then validate depth coverage.
    let kept = fast::suppress(corners, config.nms_spacing, existing_anchors, usize::MAX);
    for c in kept {
        if patches.len() >= budget {
            break;
        }
        let anchor = Vector2::new(c.x as f64, c.y as f64);
        // spacing against patches accepted in this call
        if patches
            .iter()
            .any(|p: &Patch| (p.anchor - anchor).norm() < config.nms_spacing)
        {
            continue;
        }
        let mut pixels = Vec::with_capacity(window);
        let mut valid = 0usize;
        for (dx, dy) in config.offsets() {
            let x = (c.x as i32 + dx) as usize;
            let y = (c.y as i32 + dy) as usize;
            let depth = *frame.depth.get(x, y) as f64;
            let normal = normals.get(x, y);
            let valid_depth = depth > 0.0 && normal.is_some();
            if valid_depth {
                valid += 1;
            }
            pixels.push(PatchPixel {
                pixel: Vector2::new(x as f64, y as f64),
                intensity: *frame.intensity.get(x, y) as f64,
                depth,
                normal: normal.unwrap_or_else(Vector3::zeros),
                valid_depth,
            });
        }
        if (valid as f64) < config.min_valid_fraction * window as f64 {
            continue;
        }
        patches.push(Patch { id: *next_id, anchor, pixels, source_frame, quality: 0.0 });
        *next_id += 1;
    }
    patches
}

// ---------------------------------------------------------------------------
// Back-projection and deformation

/// Lift the valid-depth pixels of a patch into world coordinates.
pub fn back_project(
    patch: &Patch,
    pose_prev: &Pose,
    intr: &CameraIntrinsics,
) -> Result<WorldPatch, PatchError> {
    let mut points = Vec::new();
    let mut intensities = Vec::new();
    let mut normals = Vec::new();
    let mut source_pixels = Vec::new();
    for px in &patch.pixels {
        if !px.valid_depth {
            continue;
        }
        let p_cam = unproject(intr, &px.pixel, px.depth).expect("valid depth");
        points.push(pose_prev.transform(&p_cam));
        intensities.push(px.intensity);
        normals.push(pose_prev.rotate(&px.normal));
        source_pixels.push(px.pixel);
    }
    if points.is_empty() {
        return Err(PatchError::NoValidPixels);
    }
    let anchor_index = source_pixels
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            (*a - patch.anchor)
                .norm_squared()
                .partial_cmp(&(*b - patch.anchor).norm_squared())
                .unwrap()
        })
        .map(|(i, _)| i)
        .unwrap();
    Ok(WorldPatch { points, intensities, normals, source_pixels, anchor_index })
}

/// Project every world point into the current camera and resolve the SE
/// effect: occluded (shrink) pixels are removed per integer cell by keeping
/// the smallest current-camera depth; an enlarged bounding box flags extend.
pub fn deform(
    world: &WorldPatch,
    pose_curr: &Pose,
    intr: &CameraIntrinsics,
    original_size: usize,
    min_survivor_fraction: f64,
) -> Result<DeformedPatch, PatchError> {
    let inv = pose_curr.inverse();
    let n = world.points.len();
    let mut projected: Vec<Option<Vector2<f64>>> = vec![None; n];
    let mut camera_depth = vec![0.0f64; n];
    // integer cell -> (depth, index) winner
    let mut cells: BTreeMap<(i64, i64), (f64, usize)> = BTreeMap::new();
    let mut collision = false;
    for (i, p) in world.points.iter().enumerate() {
        let q = inv.transform(p);
        camera_depth[i] = q.z;
        let Ok(px) = project(intr, &q) else { continue };
        projected[i] = Some(px);
        let cell = (px.x.round() as i64, px.y.round() as i64);
        match cells.get(&cell) {
            Some(&(d, _)) => {
                collision = true;
                if q.z < d {
                    cells.insert(cell, (q.z, i));
                }
            }
            None => {
                cells.insert(cell, (q.z, i));
            }
        }
    }

    let mut surviving: Vec<usize> = cells.values().map(|&(_, i)| i).collect();
    surviving.sort_unstable();

    let mut bbox = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
    for (&(cx, cy), _) in cells.iter() {
        bbox.0 = bbox.0.min(cx);
        bbox.1 = bbox.1.min(cy);
        bbox.2 = bbox.2.max(cx);
        bbox.3 = bbox.3.max(cy);
    }

    let extend = !cells.is_empty()
        && ((bbox.2 - bbox.0 + 1) > original_size as i64
            || (bbox.3 - bbox.1 + 1) > original_size as i64);
    let se_status = match (collision, extend) {
        (false, false) => SeStatus::None,
        (true, false) => SeStatus::Shrink,
        (false, true) => SeStatus::Extend,
        (true, true) => SeStatus::Both,
    };

    let inside = surviving
        .iter()
        .filter(|&&i| projected[i].map_or(false, |px| intr.contains(&px)))
        .count();
    if (inside as f64) < min_survivor_fraction * n as f64 {
        return Err(PatchError::PatchLost);
    }

    Ok(DeformedPatch { projected, camera_depth, surviving, se_status, bbox })
}

/// Rigid footprint used by the no-deformation ablation: the whole window is
/// translated by the displacement of the anchor pixel; per-pixel geometry is
/// ignored.
pub fn deform_rigid(
    world: &WorldPatch,
    pose_curr: &Pose,
    intr: &CameraIntrinsics,
    min_survivor_fraction: f64,
) -> Result<DeformedPatch, PatchError> {
    let inv = pose_curr.inverse();
    let n = world.points.len();
    let anchor_world = &world.points[world.anchor_index];
    let anchor_cam = inv.transform(anchor_world);
    let anchor_px = project(intr, &anchor_cam).map_err(|_| PatchError::PatchLost)?;
    let shift = anchor_px - world.source_pixels[world.anchor_index];

    let mut projected = Vec::with_capacity(n);
    let mut camera_depth = vec![anchor_cam.z; n];
    let mut surviving = Vec::new();
    let mut bbox = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
    for (i, src) in world.source_pixels.iter().enumerate() {
        let px = src + shift;
        projected.push(Some(px));
        camera_depth[i] = anchor_cam.z;
        surviving.push(i);
        let (cx, cy) = (px.x.round() as i64, px.y.round() as i64);
        bbox.0 = bbox.0.min(cx);
        bbox.1 = bbox.1.min(cy);
        bbox.2 = bbox.2.max(cx);
        bbox.3 = bbox.3.max(cy);
    }
    let inside = projected
        .iter()
        .filter(|p| p.map_or(false, |px| intr.contains(&px)))
        .count();
    if (inside as f64) < min_survivor_fraction * n as f64 {
        return Err(PatchError::PatchLost);
    }
    Ok(DeformedPatch { projected, camera_depth, surviving, se_status: SeStatus::None, bbox })
}

// ---------------------------------------------------------------------------
// Residuals

/// Photometric residuals (sampled minus stored intensity) over the surviving
/// in-bounds pixels. Returns (world index, residual) pairs.
pub fn photometric_residuals(
    deformed: &DeformedPatch,
    world: &WorldPatch,
    frame: &Frame,
) -> Vec<(usize, f64)> {
    deformed
        .surviving
        .iter()
        .filter_map(|&i| {
            let px = deformed.projected[i]?;
            let sampled = frame.intensity.sample_bilinear(px.x, px.y)?;
            Some((i, sampled - world.intensities[i]))
        })
        .collect()
}

/// Point-to-plane residuals: current-frame depth is read (nearest-neighbor)
/// at each projected location, lifted, transformed to world with the pose
/// estimate and measured against the stored tangent plane.
pub fn geometric_residuals(
    deformed: &DeformedPatch,
    world: &WorldPatch,
    frame: &Frame,
    pose_curr: &Pose,
    intr: &CameraIntrinsics,
) -> Vec<(usize, f64)> {
    deformed
        .surviving
        .iter()
        .filter_map(|&i| {
            let px = deformed.projected[i]?;
            let d = frame.depth.sample_nearest(px.x, px.y)?;
            if d <= 0.0 {
                return None;
            }
            let p_cam = unproject(intr, &px, d).ok()?;
            let p_world = pose_curr.transform(&p_cam);
            Some((i, (p_world - world.points[i]).dot(&world.normals[i])))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Stacked objective

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualKind {
    Photometric,
    Geometric,
}

/// Bookkeeping for one residual row.
#[derive(Debug, Clone)]
pub struct RowRef {
    pub patch_id: u64,
    pub world_index: usize,
    pub kind: ResidualKind,
}

enum FrozenRow {
    Photometric {
        world_point: Vector3<f64>,
        stored_intensity: f64,
        /// fallback when a perturbed pose pushes the sample off the image
        built_residual: f64,
    },
    Geometric {
        /// current-camera point from the sensor depth, fixed at association
        point_cam: Vector3<f64>,
        world_point: Vector3<f64>,
        world_normal: Vector3<f64>,
    },
}

/// Residual rows with fixed pixel associations. The deformation/survivor
/// set and depth lookups are frozen at construction; the rows remain smooth
/// functions of the pose, which is what the Jacobian differentiates (and
/// what a finite-difference check must perturb).
pub struct FrozenObjective {
    rows: Vec<(FrozenRow, RowRef, f64)>, // (row, bookkeeping, weight)
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    /// Photometric-vs-geometric balance in [0, 1].
    pub lambda: f64,
    /// Photometric scale, gray levels.
    pub sigma_p: f64,
    /// Geometric scale, meters.
    pub sigma_g: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self { lambda: 0.5, sigma_p: 10.0, sigma_g: 0.05 }
    }
}

/// The stacked residual vector and its pose Jacobian. `||r||^2` equals the
/// weighted two-term patch energy under the row normalization
/// sqrt(lambda)/sigma_p and sqrt(1-lambda)/sigma_g.
pub struct StackedObjective {
    pub residuals: DVector<f64>,
    /// n x 6 Jacobian over [dtheta, dt]: left-multiplicative rotation
    /// perturbation R' = Exp(dtheta) R with additive translation t' = t + dt
    /// (the same error-state convention the filter propagates).
    pub jacobian: DMatrix<f64>,
    pub rows: Vec<RowRef>,
    pub frozen: FrozenObjective,
}

impl FrozenObjective {
    /// Build from already-deformed patches; association order is patch order,
    /// then world-pixel order, so stacking is deterministic.
    pub fn build(
        tracked: &[(u64, &WorldPatch, &DeformedPatch)],
        frame: &Frame,
        pose_est: &Pose,
        intr: &CameraIntrinsics,
        cfg: &ObjectiveConfig,
    ) -> Self {
        assert!((0.0..=1.0).contains(&cfg.lambda));
        let w_photo = cfg.lambda.sqrt() / cfg.sigma_p;
        let w_geo = (1.0 - cfg.lambda).sqrt() / cfg.sigma_g;
        let mut rows = Vec::new();
        for (patch_id, world, deformed) in tracked {
            if w_photo > 0.0 {
                for (i, r) in photometric_residuals(deformed, world, frame) {
                    rows.push((
                        FrozenRow::Photometric {
                            world_point: world.points[i],
                            stored_intensity: world.intensities[i],
                            built_residual: r,
                        },
                        RowRef { patch_id: *patch_id, world_index: i, kind: ResidualKind::Photometric },
                        w_photo,
                    ));
                }
            }
            if w_geo > 0.0 {
                for &i in &deformed.surviving {
                    let Some(px) = deformed.projected[i] else { continue };
                    let Some(d) = frame.depth.sample_nearest(px.x, px.y) else { continue };
                    if d <= 0.0 {
                        continue;
                    }
                    let Ok(point_cam) = unproject(intr, &px, d) else { continue };
                    rows.push((
                        FrozenRow::Geometric {
                            point_cam,
                            world_point: world.points[i],
                            world_normal: world.normals[i],
                        },
                        RowRef { patch_id: *patch_id, world_index: i, kind: ResidualKind::Geometric },
                        w_geo,
                    ));
                }
            }
        }
        let _ = pose_est;
        Self { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Weighted residual vector at an arbitrary pose, associations fixed.
    pub fn residuals_at(&self, pose: &Pose, frame: &Frame, intr: &CameraIntrinsics) -> DVector<f64> {
        let inv = pose.inverse();
        DVector::from_iterator(
            self.rows.len(),
            self.rows.iter().map(|(row, _, w)| match row {
                FrozenRow::Photometric { world_point, stored_intensity, built_residual } => {
                    let q = inv.transform(world_point);
                    let r = project(intr, &q)
                        .ok()
                        .and_then(|px| frame.intensity.sample_bilinear(px.x, px.y))
                        .map(|s| s - stored_intensity)
                        .unwrap_or(*built_residual);
                    w * r
                }
                FrozenRow::Geometric { point_cam, world_point, world_normal } => {
                    w * (pose.transform(point_cam) - world_point).dot(world_normal)
                }
            }),
        )
    }

    /// Analytic Jacobian at a pose; exact derivative of [`Self::residuals_at`]
    /// wherever the bilinear interpolant is differentiable.
    pub fn jacobian_at(&self, pose: &Pose, frame: &Frame, intr: &CameraIntrinsics) -> DMatrix<f64> {
        let inv = pose.inverse();
        let rt = pose.rotation.transpose();
        let mut jac = DMatrix::zeros(self.rows.len(), 6);
        for (k, (row, _, w)) in self.rows.iter().enumerate() {
            match row {
                FrozenRow::Photometric { world_point, .. } => {
                    let q = inv.transform(world_point);
                    if q.z <= 0.0 {
                        continue;
                    }
                    let Ok(px) = project(intr, &q) else { continue };
                    let Some((gx, gy)) = frame.intensity.gradient_bilinear(px.x, px.y) else {
                        continue;
                    };
                    let z = q.z;
                    let dpi = Matrix2x3::new(
                        intr.fx / z, 0.0, -intr.fx * q.x / (z * z),
                        0.0, intr.fy / z, -intr.fy * q.y / (z * z),
                    );
                    // perturbation R' = Exp(dtheta) R, t' = t + dt gives
                    // dq/dtheta = R^T [P - t]x, dq/dt = -R^T
                    let dq_dtheta = rt * crate::geometry::skew(&(world_point - pose.translation));
                    let dq_dt = -rt;
                    let grad = RowVector3::<f64>::from_iterator(
                        (0..3).map(|c| gx * dpi[(0, c)] + gy * dpi[(1, c)]),
                    );
                    let j_theta = grad * dq_dtheta;
                    let j_t = grad * dq_dt;
                    for c in 0..3 {
                        jac[(k, c)] = w * j_theta[c];
                        jac[(k, 3 + c)] = w * j_t[c];
                    }
                }
                FrozenRow::Geometric { point_cam, world_normal, .. } => {
                    let rotated = pose.rotate(point_cam);
                    let j_theta = rotated.cross(world_normal);
                    for c in 0..3 {
                        jac[(k, c)] = w * j_theta[c];
                        jac[(k, 3 + c)] = w * world_normal[c];
                    }
                }
            }
        }
        jac
    }

    pub fn row_refs(&self) -> impl Iterator<Item = &RowRef> {
        self.rows.iter().map(|(_, r, _)| r)
    }

    /// Per-patch mean absolute *unweighted* photometric residual at `pose`
    /// (the tracking-quality metric), keyed by patch id.
    pub fn per_patch_intensity_error(
        &self,
        pose: &Pose,
        frame: &Frame,
        intr: &CameraIntrinsics,
    ) -> BTreeMap<u64, f64> {
        let inv = pose.inverse();
        let mut sums: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
        for (row, rref, _) in &self.rows {
            if let FrozenRow::Photometric { world_point, stored_intensity, built_residual } = row {
                let q = inv.transform(world_point);
                let r = project(intr, &q)
                    .ok()
                    .and_then(|px| frame.intensity.sample_bilinear(px.x, px.y))
                    .map(|s| s - stored_intensity)
                    .unwrap_or(*built_residual);
                let e = sums.entry(rref.patch_id).or_insert((0.0, 0));
                e.0 += r.abs();
                e.1 += 1;
            }
        }
        sums.into_iter().map(|(id, (s, n))| (id, s / n as f64)).collect()
    }
}

/// Deform every patch at the pose estimate and stack residuals + Jacobian.
pub fn stack_objective(
    tracked: &[(u64, &WorldPatch, &DeformedPatch)],
    frame: &Frame,
    pose_est: &Pose,
    intr: &CameraIntrinsics,
    cfg: &ObjectiveConfig,
) -> Result<StackedObjective, PatchError> {
    let frozen = FrozenObjective::build(tracked, frame, pose_est, intr, cfg);
    if frozen.is_empty() {
        return Err(PatchError::NoResiduals);
    }
    let residuals = frozen.residuals_at(pose_est, frame, intr);
    let jacobian = frozen.jacobian_at(pose_est, frame, intr);
    let rows = frozen.row_refs().cloned().collect();
    Ok(StackedObjective { residuals, jacobian, rows, frozen })
}
