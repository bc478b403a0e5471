//! End-to-end tracking and reconstruction pipeline.
//!
//! Per frame: preintegrate the IMU window, propagate the filter, deform the
//! live patches at the predicted pose, run the iterated measurement update,
//! fuse depth into the TSDF volume, then maintain the patch set (quality
//! bookkeeping, culling, re-squaring, replenishment).

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::filter::{
    iterated_update, kalman_predict, FilterError, FilterState, IterationReport, MeasurementModel,
    NoiseConfig, UpdateConfig,
};
use crate::frame::{Frame, ImuSample, SequenceConfig};
use crate::geometry::{compute_normals, CameraIntrinsics, NormalMap, Pose};
use crate::img::Image;
use crate::imu::{preintegrate, PreintegratedDelta};
use crate::maintenance::{
    cull, refresh, replenish, update_quality, MaintenanceConfig, TrackedFeature,
};
use crate::mesh::{marching_cubes, write_ply, Mesh, MeshError};
use crate::metrics::AieAccumulator;
use crate::patch::{
    deform, deform_rigid, DeformedPatch, FrozenObjective, ObjectiveConfig, PatchConfig,
};
use crate::tsdf::{TsdfConfig, TsdfError, TsdfVolume};
use crate::tum::TrajectoryEntry;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Tsdf(#[from] TsdfError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("frames must arrive with increasing timestamps")]
    NonMonotonicFrames,
}

/// Full pipeline configuration; loadable from TOML.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub patch: PatchConfig,
    pub objective: ObjectiveConfig,
    pub noise: NoiseConfig,
    pub update: UpdateConfig,
    pub maintenance: MaintenanceConfig,
    pub tsdf: TsdfConfig,
    /// World-frame corner of the reconstruction volume, meters.
    pub volume_origin: [f64; 3],
    /// Volume extent in voxels.
    pub volume_dims: [usize; 3],
    /// Ray-march limit for model depth, meters.
    pub max_ray_distance: f64,
    /// Use inertial propagation between frames (otherwise a static-motion
    /// prior with inflated process noise).
    pub use_imu: bool,
    /// Use per-pixel patch deformation (otherwise rigid window translation).
    pub use_deformation: bool,
    /// Prefer ray-cast model depth over sensor depth when re-squaring and
    /// extracting patches.
    pub use_model_depth: bool,
    /// Process-noise inflation applied when running without the IMU.
    pub no_imu_noise_scale: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            patch: PatchConfig::default(),
            objective: ObjectiveConfig::default(),
            noise: NoiseConfig::default(),
            update: UpdateConfig::default(),
            maintenance: MaintenanceConfig::default(),
            tsdf: TsdfConfig::default(),
            volume_origin: [-2.0, -2.0, -0.5],
            volume_dims: [200, 200, 200],
            max_ray_distance: 8.0,
            use_imu: true,
            use_deformation: true,
            use_model_depth: true,
            no_imu_noise_scale: 10.0,
        }
    }
}

/// Per-frame processing summary.
#[derive(Debug, Clone, serde::Serialize)]
pub struct FrameReport {
    pub frame_index: usize,
    pub timestamp: f64,
    pub imu_samples: usize,
    pub update: IterationReport,
    pub tracked_patches: usize,
    pub lost_patches: usize,
    pub culled_patches: usize,
    pub refreshed_patches: usize,
    pub added_patches: usize,
    /// Mean intensity error over this frame's tracked patches, gray levels.
    pub frame_intensity_error: Option<f64>,
}

/// Whole-run summary; serialized as versioned JSON.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub frames: usize,
    pub average_intensity_error: Option<f64>,
    pub observed_voxels: usize,
    pub per_frame: Vec<FrameReport>,
}

/// Measurement adapter: the frozen patch objective as seen by the filter.
struct PatchMeasurement<'a> {
    frozen: &'a FrozenObjective,
    frame: &'a Frame,
    intr: &'a CameraIntrinsics,
}

impl MeasurementModel for PatchMeasurement<'_> {
    fn linearize(
        &self,
        pose: &Pose,
    ) -> Option<(nalgebra::DVector<f64>, nalgebra::DMatrix<f64>)> {
        if self.frozen.is_empty() {
            return None;
        }
        Some((
            self.frozen.residuals_at(pose, self.frame, self.intr),
            self.frozen.jacobian_at(pose, self.frame, self.intr),
        ))
    }
}

pub struct Pipeline {
    pub config: PipelineConfig,
    intrinsics: CameraIntrinsics,
    imu_extrinsic: Pose,
    gravity: Vector3<f64>,
    pub state: FilterState,
    pub features: Vec<TrackedFeature>,
    pub volume: TsdfVolume,
    pub trajectory: Vec<TrajectoryEntry>,
    aie: AieAccumulator,
    reports: Vec<FrameReport>,
    pending_imu: Vec<ImuSample>,
    last_frame_time: Option<f64>,
    frame_index: usize,
    next_patch_id: u64,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, sequence: &SequenceConfig) -> Result<Self, PipelineError> {
        let volume = TsdfVolume::new(
            Vector3::from(config.volume_origin),
            (config.volume_dims[0], config.volume_dims[1], config.volume_dims[2]),
            &config.tsdf,
        )?;
        Ok(Self {
            intrinsics: sequence.intrinsics,
            imu_extrinsic: sequence.imu_extrinsic.clone(),
            gravity: sequence.gravity_world,
            state: FilterState::initial(Pose::identity()),
            features: Vec::new(),
            volume,
            trajectory: Vec::new(),
            aie: AieAccumulator::default(),
            reports: Vec::new(),
            pending_imu: Vec::new(),
            last_frame_time: None,
            frame_index: 0,
            next_patch_id: 0,
            config,
        })
    }

    /// Buffer an IMU sample for the next frame interval.
    pub fn push_imu(&mut self, sample: ImuSample) {
        self.pending_imu.push(sample);
    }

    /// Depth and normals used for patch admission: ray-cast model depth with
    /// sensor fallback, or plain sensor depth.
    fn admission_depth(&self, frame: &Frame, pose: &Pose) -> (Image<f32>, NormalMap) {
        let depth = if self.config.use_model_depth && self.volume.observed_voxels() > 0 {
            let mut model =
                self.volume.render_depth(&self.intrinsics, pose, self.config.max_ray_distance);
            // fall back to the sensor wherever the model has no surface yet
            for y in 0..model.height {
                for x in 0..model.width {
                    if *model.get(x, y) <= 0.0 {
                        model.set(x, y, *frame.depth.get(x, y));
                    }
                }
            }
            model
        } else {
            frame.depth.clone()
        };
        let normals = compute_normals(&depth, &self.intrinsics);
        (depth, normals)
    }

    fn preintegrate_window(&mut self, t_prev: f64, t_now: f64) -> (PreintegratedDelta, usize) {
        let duration = t_now - t_prev;
        if !self.config.use_imu {
            self.pending_imu.clear();
            return (PreintegratedDelta::identity(duration), 0);
        }
        // samples that influence [t_prev, t_now]: keep the last one before
        // the window for sample-and-hold, drop everything older
        let samples: Vec<ImuSample> = self
            .pending_imu
            .iter()
            .filter(|s| s.timestamp <= t_now)
            .cloned()
            .collect();
        self.pending_imu.retain(|s| s.timestamp > t_now);
        let used = samples.len();
        match preintegrate(
            &samples,
            t_prev,
            t_now,
            &self.imu_extrinsic,
            &self.gravity,
            &self.state.velocity,
            &self.state.pose.rotation,
        ) {
            Ok(delta) => (delta, used),
            Err(e) => {
                log::warn!("preintegration failed ({e}); falling back to static prior");
                (PreintegratedDelta::identity(duration), 0)
            }
        }
    }

    /// Process one frame; returns its report.
    pub fn push_frame(&mut self, frame: &Frame) -> Result<FrameReport, PipelineError> {
        if let Some(prev) = self.last_frame_time {
            if frame.timestamp <= prev {
                return Err(PipelineError::NonMonotonicFrames);
            }
        }

        let report = if self.last_frame_time.is_none() {
            self.initialize(frame)?
        } else {
            self.track(frame)?
        };
        self.last_frame_time = Some(frame.timestamp);
        self.trajectory.push(TrajectoryEntry {
            timestamp: frame.timestamp,
            pose: self.state.pose.clone(),
        });
        self.reports.push(report.clone());
        self.frame_index += 1;
        Ok(report)
    }

    fn initialize(&mut self, frame: &Frame) -> Result<FrameReport, PipelineError> {
        // world frame := first camera frame
        self.state = FilterState::initial(Pose::identity());
        self.pending_imu.retain(|s| s.timestamp > frame.timestamp);
        self.volume.integrate(&frame.depth, &self.intrinsics, &self.state.pose);
        let (_, normals) = (frame.depth.clone(), compute_normals(&frame.depth, &self.intrinsics));
        let mut added = 0;
        let _ = replenish(
            &mut self.features,
            &[],
            frame,
            &normals,
            &self.state.pose,
            &self.intrinsics,
            &self.config.patch,
            self.frame_index,
            &mut self.next_patch_id,
        )
        .map(|n| added = n);
        Ok(FrameReport {
            frame_index: self.frame_index,
            timestamp: frame.timestamp,
            imu_samples: 0,
            update: IterationReport::default(),
            tracked_patches: self.features.len(),
            lost_patches: 0,
            culled_patches: 0,
            refreshed_patches: 0,
            added_patches: added,
            frame_intensity_error: None,
        })
    }

    fn deform_feature(
        &self,
        feature: &TrackedFeature,
        pose: &Pose,
    ) -> Result<DeformedPatch, crate::patch::PatchError> {
        if self.config.use_deformation {
            deform(
                &feature.world,
                pose,
                &self.intrinsics,
                self.config.patch.patch_size,
                self.config.patch.min_survivor_fraction,
            )
        } else {
            deform_rigid(
                &feature.world,
                pose,
                &self.intrinsics,
                self.config.patch.min_survivor_fraction,
            )
        }
    }

    fn track(&mut self, frame: &Frame) -> Result<FrameReport, PipelineError> {
        let t_prev = self.last_frame_time.unwrap();
        let (delta, imu_samples) = self.preintegrate_window(t_prev, frame.timestamp);
        let noise = if self.config.use_imu {
            self.config.noise
        } else {
            NoiseConfig {
                process_rotation_std: self.config.noise.process_rotation_std
                    * self.config.no_imu_noise_scale,
                process_translation_std: self.config.noise.process_translation_std
                    * self.config.no_imu_noise_scale,
                process_velocity_std: self.config.noise.process_velocity_std
                    * self.config.no_imu_noise_scale,
                measurement_variance: self.config.noise.measurement_variance,
            }
        };
        let predicted = kalman_predict(&self.state, &delta, &noise);

        // deform the live patches at the predicted pose; losing a patch here
        // removes it from the feature set
        let mut deformed: Vec<(usize, DeformedPatch)> = Vec::new();
        let mut lost = Vec::new();
        for (idx, f) in self.features.iter().enumerate() {
            match self.deform_feature(f, &predicted.pose) {
                Ok(d) => deformed.push((idx, d)),
                Err(_) => lost.push(idx),
            }
        }
        let lost_patches = lost.len();

        // frozen objective over the surviving patches
        let tracked: Vec<(u64, &crate::patch::WorldPatch, &DeformedPatch)> = deformed
            .iter()
            .map(|(idx, d)| (self.features[*idx].patch.id, &self.features[*idx].world, d))
            .collect();
        let frozen = FrozenObjective::build(
            &tracked,
            frame,
            &predicted.pose,
            &self.intrinsics,
            &self.config.objective,
        );
        let model = PatchMeasurement { frozen: &frozen, frame, intr: &self.intrinsics };
        let (updated, update_report) =
            iterated_update(&predicted, &model, &noise, &self.config.update)?;
        self.state = updated;

        // tracking quality at the corrected pose
        let errors = frozen.per_patch_intensity_error(&self.state.pose, frame, &self.intrinsics);
        let mut frame_aie = AieAccumulator::default();
        for f in &mut self.features {
            if let Some(e) = errors.get(&f.patch.id) {
                update_quality(&mut f.patch, *e, &self.config.maintenance);
                frame_aie.add(*e);
                self.aie.add(*e);
            }
        }

        // drop lost features (largest index first keeps indices valid)
        for idx in lost.into_iter().rev() {
            self.features.remove(idx);
        }
        let culled = cull(&mut self.features, &self.config.maintenance);

        // fuse depth at the corrected pose
        self.volume.integrate(&frame.depth, &self.intrinsics, &self.state.pose);

        // maintenance: re-square SE patches, then replenish the budget
        let (admission_depth, admission_normals) = self.admission_depth(frame, &self.state.pose);
        let mut refreshed = 0usize;
        if self.config.use_deformation {
            for i in 0..self.features.len() {
                let Ok(d) = self.deform_feature(&self.features[i], &self.state.pose) else {
                    continue;
                };
                if let Some(new) = refresh(
                    &self.features[i],
                    &d,
                    frame,
                    &admission_depth,
                    &admission_normals,
                    &self.state.pose,
                    &self.intrinsics,
                    &self.config.patch,
                    self.frame_index,
                ) {
                    self.features[i] = new;
                    refreshed += 1;
                }
            }
        }
        let anchors: Vec<Vector2<f64>> = self
            .features
            .iter()
            .filter_map(|f| {
                let q = self.state.pose.inverse().transform(&f.world.points[f.world.anchor_index]);
                crate::geometry::project(&self.intrinsics, &q).ok()
            })
            .collect();
        let added = replenish(
            &mut self.features,
            &anchors,
            frame,
            &admission_normals,
            &self.state.pose,
            &self.intrinsics,
            &self.config.patch,
            self.frame_index,
            &mut self.next_patch_id,
        )
        .unwrap_or(0);

        Ok(FrameReport {
            frame_index: self.frame_index,
            timestamp: frame.timestamp,
            imu_samples,
            update: update_report,
            tracked_patches: self.features.len(),
            lost_patches,
            culled_patches: culled.len(),
            refreshed_patches: refreshed,
            added_patches: added,
            frame_intensity_error: frame_aie.mean(),
        })
    }

    /// Average intensity error over the whole run so far.
    pub fn average_intensity_error(&self) -> Option<f64> {
        self.aie.mean()
    }

    pub fn report(&self) -> RunReport {
        RunReport {
            schema_version: 1,
            frames: self.frame_index,
            average_intensity_error: self.aie.mean(),
            observed_voxels: self.volume.observed_voxels(),
            per_frame: self.reports.clone(),
        }
    }

    /// Extract the current surface mesh.
    pub fn mesh(&self) -> Result<Mesh, PipelineError> {
        Ok(marching_cubes(&self.volume)?)
    }

    pub fn write_mesh(&self, path: &std::path::Path) -> Result<(), PipelineError> {
        let mesh = self.mesh()?;
        Ok(write_ply(&mesh, path)?)
    }
}
