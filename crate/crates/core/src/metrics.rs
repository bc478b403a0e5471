//! Evaluation metrics: average intensity error (tracking quality) and
//! absolute trajectory error against a reference trajectory.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::Pose;
use crate::tum::TrajectoryEntry;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("the trajectories share no timestamps within the association window")]
    NoOverlap,
}

/// Running aggregate of per-patch mean intensity errors (gray levels).
#[derive(Debug, Clone, Copy, Default, serde::Serialize)]
pub struct AieAccumulator {
    sum: f64,
    count: usize,
}

impl AieAccumulator {
    /// Fold in one patch-frame observation.
    pub fn add(&mut self, error: f64) {
        self.sum += error;
        self.count += 1;
    }

    /// Fold in every value of one frame's per-patch error map.
    pub fn add_frame<'a>(&mut self, errors: impl IntoIterator<Item = &'a f64>) {
        for e in errors {
            self.add(*e);
        }
    }

    pub fn observations(&self) -> usize {
        self.count
    }

    /// Mean over all observations; `None` before the first one.
    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// Associate two trajectories by nearest timestamp within `window` seconds.
fn associate(
    estimate: &[TrajectoryEntry],
    reference: &[TrajectoryEntry],
    window: f64,
) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (i, e) in estimate.iter().enumerate() {
        let best = reference
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                (a.timestamp - e.timestamp)
                    .abs()
                    .partial_cmp(&(b.timestamp - e.timestamp).abs())
                    .unwrap()
            })
            .filter(|(_, r)| (r.timestamp - e.timestamp).abs() <= window);
        if let Some((j, _)) = best {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Rigid (rotation + translation) least-squares alignment of point sets,
/// mapping `from` onto `to` (Umeyama / Kabsch without scale).
pub fn rigid_align(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> Pose {
    assert_eq!(from.len(), to.len());
    assert!(!from.is_empty());
    let n = from.len() as f64;
    let mean_f: Vector3<f64> = from.iter().sum::<Vector3<f64>>() / n;
    let mean_t: Vector3<f64> = to.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::<f64>::zeros();
    for (f, t) in from.iter().zip(to.iter()) {
        cov += (t - mean_t) * (f - mean_f).transpose();
    }
    let svd = cov.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut s = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    Pose::new(r, mean_t - r * mean_f)
}

/// Absolute trajectory error: RMSE of translation differences after rigid
/// alignment, with nearest-timestamp association inside `window` seconds.
pub fn absolute_trajectory_error(
    estimate: &[TrajectoryEntry],
    reference: &[TrajectoryEntry],
    window: f64,
) -> Result<f64, MetricsError> {
    let pairs = associate(estimate, reference, window);
    if pairs.len() < 2 {
        return Err(MetricsError::NoOverlap);
    }
    let est: Vec<Vector3<f64>> = pairs.iter().map(|&(i, _)| estimate[i].pose.translation).collect();
    let refp: Vec<Vector3<f64>> = pairs.iter().map(|&(_, j)| reference[j].pose.translation).collect();
    let align = rigid_align(&est, &refp);
    let sq_sum: f64 = est
        .iter()
        .zip(refp.iter())
        .map(|(e, r)| (align.transform(e) - r).norm_squared())
        .sum();
    Ok((sq_sum / pairs.len() as f64).sqrt())
}
