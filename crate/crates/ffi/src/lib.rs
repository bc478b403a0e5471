//! C ABI for the reconstruction engine.
//!
//! All entry points are panic-safe, return [`VifStatus`] codes, and operate
//! on an opaque [`VifPipeline`] handle. The generated header lands in
//! `include/vifusion.h` (see `build.rs`).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use vifusion_core::frame::{Frame, ImuSample, SequenceConfig};
use vifusion_core::geometry::CameraIntrinsics;
use vifusion_core::img::Image;
use vifusion_core::pipeline::{Pipeline, PipelineConfig};

/// Status code returned by every fallible FFI call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VifStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Runtime = 3,
    Io = 4,
    /// The requested value does not exist yet (e.g. statistics before the
    /// first tracked frame).
    Unavailable = 5,
    /// A panic was caught at the FFI boundary; the handle should be
    /// destroyed.
    Panic = 6,
}

/// Pinhole camera parameters for the sequence to be tracked.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct VifCameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

/// Camera-to-world pose estimate. `rotation` is row-major.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct VifPose {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

/// Opaque tracking/reconstruction pipeline handle.
pub struct VifPipeline {
    inner: Pipeline,
    width: usize,
    height: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let sanitized: String = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn fail(status: VifStatus, msg: impl Into<String>) -> VifStatus {
    set_error(msg);
    status
}

fn guarded(f: impl FnOnce() -> VifStatus) -> VifStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            fail(VifStatus::Panic, format!("panic: {msg}"))
        }
    }
}

/// Copies the message of the most recent error on this thread into `buffer`
/// (NUL-terminated, truncated to `length` bytes). Returns the full message
/// length in bytes, excluding the terminator.
///
/// # Safety
/// `buffer` must point to `length` writable bytes, or be null (query mode).
#[no_mangle]
pub unsafe extern "C" fn vif_last_error_message(buffer: *mut c_char, length: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buffer.is_null() && length > 0 {
            let n = bytes.len().min(length - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buffer, n);
            *buffer.add(n) = 0;
        }
        bytes.len()
    })
}

/// Creates a pipeline. `config_toml` may be null for default settings;
/// otherwise it must be a NUL-terminated TOML document with the same schema
/// as the CLI configuration file. On success `*out` owns the new handle.
///
/// # Safety
/// `out` must be a valid pointer; `config_toml`, when non-null, must be a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vif_pipeline_create(
    intrinsics: VifCameraIntrinsics,
    imu_rate: f64,
    camera_rate: f64,
    config_toml: *const c_char,
    out: *mut *mut VifPipeline,
) -> VifStatus {
    guarded(|| {
        if out.is_null() {
            return fail(VifStatus::NullPointer, "out handle pointer is null");
        }
        if !(intrinsics.fx > 0.0
            && intrinsics.fy > 0.0
            && intrinsics.width > 0
            && intrinsics.height > 0
            && intrinsics.cx >= 0.0
            && intrinsics.cx < intrinsics.width as f64
            && intrinsics.cy >= 0.0
            && intrinsics.cy < intrinsics.height as f64)
        {
            return fail(VifStatus::InvalidArgument, "invalid camera intrinsics");
        }
        if !(imu_rate > camera_rate && camera_rate > 0.0) {
            return fail(
                VifStatus::InvalidArgument,
                "rates must satisfy imu_rate > camera_rate > 0",
            );
        }
        let config = if config_toml.is_null() {
            PipelineConfig::default()
        } else {
            let Ok(text) = CStr::from_ptr(config_toml).to_str() else {
                return fail(VifStatus::InvalidArgument, "config is not valid UTF-8");
            };
            match toml::from_str::<PipelineConfig>(text) {
                Ok(cfg) => cfg,
                Err(e) => return fail(VifStatus::InvalidArgument, format!("invalid config: {e}")),
            }
        };
        let intr = CameraIntrinsics::new(
            intrinsics.fx,
            intrinsics.fy,
            intrinsics.cx,
            intrinsics.cy,
            intrinsics.width as usize,
            intrinsics.height as usize,
        );
        let seq_cfg = SequenceConfig::new(intr, imu_rate, camera_rate);
        match Pipeline::new(config, &seq_cfg) {
            Ok(inner) => {
                let handle = Box::new(VifPipeline {
                    inner,
                    width: intrinsics.width as usize,
                    height: intrinsics.height as usize,
                });
                *out = Box::into_raw(handle);
                VifStatus::Ok
            }
            Err(e) => fail(VifStatus::Runtime, format!("pipeline setup failed: {e}")),
        }
    })
}

/// Destroys a handle created by `vif_pipeline_create`. Null is a no-op.
///
/// # Safety
/// `pipeline` must be null or a live handle; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vif_pipeline_destroy(pipeline: *mut VifPipeline) {
    if !pipeline.is_null() {
        drop(Box::from_raw(pipeline));
    }
}

/// Feeds one IMU sample (timestamp in seconds, accelerometer in m/s^2,
/// gyroscope in rad/s, both in the IMU body frame).
///
/// # Safety
/// `pipeline` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vif_pipeline_push_imu(
    pipeline: *mut VifPipeline,
    timestamp: f64,
    accel_x: f64,
    accel_y: f64,
    accel_z: f64,
    gyro_x: f64,
    gyro_y: f64,
    gyro_z: f64,
) -> VifStatus {
    guarded(|| {
        let Some(p) = pipeline.as_mut() else {
            return fail(VifStatus::NullPointer, "pipeline handle is null");
        };
        p.inner.push_imu(ImuSample {
            timestamp,
            accel: nalgebra::Vector3::new(accel_x, accel_y, accel_z),
            gyro: nalgebra::Vector3::new(gyro_x, gyro_y, gyro_z),
        });
        VifStatus::Ok
    })
}

/// Feeds one camera frame: row-major grayscale intensity in [0, 255] and
/// metric depth in meters (0 = invalid), both `width * height` floats as
/// configured at creation.
///
/// # Safety
/// `pipeline` must be a live handle; `intensity` and `depth` must each point
/// to `width * height` readable floats.
#[no_mangle]
pub unsafe extern "C" fn vif_pipeline_push_frame(
    pipeline: *mut VifPipeline,
    timestamp: f64,
    intensity: *const f32,
    depth: *const f32,
) -> VifStatus {
    guarded(|| {
        let Some(p) = pipeline.as_mut() else {
            return fail(VifStatus::NullPointer, "pipeline handle is null");
        };
        if intensity.is_null() || depth.is_null() {
            return fail(VifStatus::NullPointer, "image buffer is null");
        }
        let n = p.width * p.height;
        let intensity_img = Image::from_vec(
            p.width,
            p.height,
            std::slice::from_raw_parts(intensity, n).to_vec(),
        );
        let depth_img =
            Image::from_vec(p.width, p.height, std::slice::from_raw_parts(depth, n).to_vec());
        let frame = Frame::new(timestamp, intensity_img, depth_img);
        match p.inner.push_frame(&frame) {
            Ok(_) => VifStatus::Ok,
            Err(e) => fail(VifStatus::Runtime, format!("frame rejected: {e}")),
        }
    })
}

/// Writes the current camera-to-world pose estimate into `out`.
///
/// # Safety
/// `pipeline` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vif_pipeline_pose(
    pipeline: *const VifPipeline,
    out: *mut VifPose,
) -> VifStatus {
    guarded(|| {
        let Some(p) = pipeline.as_ref() else {
            return fail(VifStatus::NullPointer, "pipeline handle is null");
        };
        if out.is_null() {
            return fail(VifStatus::NullPointer, "out pose pointer is null");
        }
        let pose = &p.inner.state.pose;
        let mut rotation = [0.0f64; 9];
        for r in 0..3 {
            for c in 0..3 {
                rotation[r * 3 + c] = pose.rotation[(r, c)];
            }
        }
        *out = VifPose { rotation, translation: pose.translation.into() };
        VifStatus::Ok
    })
}

/// Number of frames tracked so far. Returns 0 for a null handle.
///
/// # Safety
/// `pipeline` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vif_pipeline_frame_count(pipeline: *const VifPipeline) -> u64 {
    pipeline.as_ref().map_or(0, |p| p.inner.trajectory.len() as u64)
}

/// Writes the run-average intensity error (gray levels) into `out`. Returns
/// `Unavailable` before any frame has been tracked against the model.
///
/// # Safety
/// `pipeline` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vif_pipeline_average_intensity_error(
    pipeline: *const VifPipeline,
    out: *mut f64,
) -> VifStatus {
    guarded(|| {
        let Some(p) = pipeline.as_ref() else {
            return fail(VifStatus::NullPointer, "pipeline handle is null");
        };
        if out.is_null() {
            return fail(VifStatus::NullPointer, "out pointer is null");
        }
        match p.inner.average_intensity_error() {
            Some(v) => {
                *out = v;
                VifStatus::Ok
            }
            None => fail(VifStatus::Unavailable, "no intensity statistics yet"),
        }
    })
}

/// Extracts the current surface mesh and writes it as binary PLY.
///
/// # Safety
/// `pipeline` must be a live handle; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vif_pipeline_write_mesh(
    pipeline: *const VifPipeline,
    path: *const c_char,
) -> VifStatus {
    guarded(|| {
        let Some(p) = pipeline.as_ref() else {
            return fail(VifStatus::NullPointer, "pipeline handle is null");
        };
        if path.is_null() {
            return fail(VifStatus::NullPointer, "path is null");
        }
        let Ok(path) = CStr::from_ptr(path).to_str() else {
            return fail(VifStatus::InvalidArgument, "path is not valid UTF-8");
        };
        match p.inner.write_mesh(std::path::Path::new(path)) {
            Ok(()) => VifStatus::Ok,
            Err(e) => fail(VifStatus::Io, format!("mesh export failed: {e}")),
        }
    })
}

/// Returns the JSON run report as a newly allocated string, or null on
/// error. Free with `vif_string_free`.
///
/// # Safety
/// `pipeline` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vif_pipeline_report_json(pipeline: *const VifPipeline) -> *mut c_char {
    let Some(p) = pipeline.as_ref() else {
        set_error("pipeline handle is null");
        return std::ptr::null_mut();
    };
    match catch_unwind(AssertUnwindSafe(|| serde_json::to_string(&p.inner.report()))) {
        Ok(Ok(json)) => CString::new(json).map_or(std::ptr::null_mut(), CString::into_raw),
        Ok(Err(e)) => {
            set_error(format!("report serialization failed: {e}"));
            std::ptr::null_mut()
        }
        Err(_) => {
            set_error("panic while building report");
            std::ptr::null_mut()
        }
    }
}

/// Frees a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must be null or a string returned by this library, freed only once.
#[no_mangle]
pub unsafe extern "C" fn vif_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
