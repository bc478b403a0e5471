//! Patch lifecycle: tracking-quality bookkeeping, culling, re-squaring of
//! deformed patches, and replenishing the feature budget.

use nalgebra::Vector2;

use crate::frame::Frame;
use crate::geometry::{CameraIntrinsics, NormalMap, Pose};
use crate::img::Image;
use crate::patch::{
    back_project, extract_patches, DeformedPatch, Patch, PatchConfig, PatchError, PatchPixel,
    SeStatus, WorldPatch,
};

/// A live feature: its source-frame patch plus the world-frame lift.
#[derive(Debug, Clone)]
pub struct TrackedFeature {
    pub patch: Patch,
    pub world: WorldPatch,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaintenanceConfig {
    /// Exponential moving-average factor for the per-patch intensity error
    /// (weight on the previous value).
    pub quality_ema: f64,
    /// Cull a patch once its averaged intensity error exceeds this many gray
    /// levels.
    pub cull_threshold: f64,
}

impl Default for MaintenanceConfig {
    fn default() -> Self {
        Self { quality_ema: 0.7, cull_threshold: 15.0 }
    }
}

/// Fold a new mean intensity error into the patch's running quality. The
/// first observation seeds the average directly.
pub fn update_quality(patch: &mut Patch, error: f64, config: &MaintenanceConfig) {
    if patch.quality == 0.0 {
        patch.quality = error;
    } else {
        patch.quality = config.quality_ema * patch.quality + (1.0 - config.quality_ema) * error;
    }
}

/// Drop features whose running intensity error exceeds the threshold.
/// Returns the culled ids.
pub fn cull(features: &mut Vec<TrackedFeature>, config: &MaintenanceConfig) -> Vec<u64> {
    let mut removed = Vec::new();
    features.retain(|f| {
        if f.patch.quality > config.cull_threshold {
            removed.push(f.patch.id);
            false
        } else {
            true
        }
    });
    removed
}

/// Re-square a deformed (shrunk or extended) patch in the current frame.
///
/// The new window is centered on the centroid of the surviving projections
/// and re-sampled from the current intensity image; depth and normals come
/// from `depth` / `normals` (typically a model ray cast with the sensor as a
/// fallback). Returns `None` when the patch no longer needs re-squaring or
/// the new window fails the validity test.
pub fn refresh(
    feature: &TrackedFeature,
    deformed: &DeformedPatch,
    frame: &Frame,
    depth: &Image<f32>,
    normals: &NormalMap,
    pose: &Pose,
    intr: &CameraIntrinsics,
    config: &PatchConfig,
    source_frame: usize,
) -> Option<TrackedFeature> {
    if deformed.se_status == SeStatus::None {
        return None;
    }
    // centroid of the surviving footprint
    let mut acc = Vector2::zeros();
    let mut n = 0usize;
    for &i in &deformed.surviving {
        if let Some(px) = deformed.projected[i] {
            acc += px;
            n += 1;
        }
    }
    if n == 0 {
        return None;
    }
    let center = acc / n as f64;
    let (cx, cy) = (center.x.round() as i64, center.y.round() as i64);
    let b = config.border() as i64;
    if cx < b
        || cy < b
        || cx >= intr.width as i64 - b
        || cy >= intr.height as i64 - b
    {
        return None;
    }

    let window = config.patch_size * config.patch_size;
    let mut pixels = Vec::with_capacity(window);
    let mut valid = 0usize;
    for (dx, dy) in config.offsets() {
        let x = (cx + dx as i64) as usize;
        let y = (cy + dy as i64) as usize;
        let d = *depth.get(x, y) as f64;
        let normal = normals.get(x, y);
        let valid_depth = d > 0.0 && normal.is_some();
        if valid_depth {
            valid += 1;
        }
        pixels.push(PatchPixel {
            pixel: Vector2::new(x as f64, y as f64),
            intensity: *frame.intensity.get(x, y) as f64,
            depth: d,
            normal: normal.unwrap_or_else(nalgebra::Vector3::zeros),
            valid_depth,
        });
    }
    if (valid as f64) < config.min_valid_fraction * window as f64 {
        return None;
    }
    let patch = Patch {
        id: feature.patch.id,
        anchor: Vector2::new(cx as f64, cy as f64),
        pixels,
        source_frame,
        quality: feature.patch.quality,
    };
    let world = back_project(&patch, pose, intr).ok()?;
    Some(TrackedFeature { patch, world })
}

/// Extract new features up to the configured budget, spaced away from the
/// anchors of the survivors (projected into the current frame).
#[allow(clippy::too_many_arguments)]
pub fn replenish(
    features: &mut Vec<TrackedFeature>,
    existing_anchors: &[Vector2<f64>],
    frame: &Frame,
    normals: &NormalMap,
    pose: &Pose,
    intr: &CameraIntrinsics,
    config: &PatchConfig,
    source_frame: usize,
    next_id: &mut u64,
) -> Result<usize, PatchError> {
    let budget = config.max_patches.saturating_sub(features.len());
    if budget == 0 {
        return Ok(0);
    }
    let fresh =
        extract_patches(frame, normals, existing_anchors, budget, config, source_frame, next_id);
    let mut added = 0;
    for patch in fresh {
        if let Ok(world) = back_project(&patch, pose, intr) {
            features.push(TrackedFeature { patch, world });
            added += 1;
        }
    }
    Ok(added)
}
