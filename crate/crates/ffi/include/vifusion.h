/* C interface for the vifusion reconstruction engine. */

#ifndef VIFUSION_H
#define VIFUSION_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible FFI call.
 */
typedef enum VifStatus {
  VifStatus_Ok = 0,
  VifStatus_NullPointer = 1,
  VifStatus_InvalidArgument = 2,
  VifStatus_Runtime = 3,
  VifStatus_Io = 4,
  /**
   * The requested value does not exist yet (e.g. statistics before the
   * first tracked frame).
   */
  VifStatus_Unavailable = 5,
  /**
   * A panic was caught at the FFI boundary; the handle should be
   * destroyed.
   */
  VifStatus_Panic = 6,
} VifStatus;

/**
 * Opaque tracking/reconstruction pipeline handle.
 */
typedef struct VifPipeline VifPipeline;

/**
 * Pinhole camera parameters for the sequence to be tracked.
 */
typedef struct VifCameraIntrinsics {
  double fx;
  double fy;
  double cx;
  double cy;
  uint32_t width;
  uint32_t height;
} VifCameraIntrinsics;

/**
 * Camera-to-world pose estimate. `rotation` is row-major.
 */
typedef struct VifPose {
  double rotation[9];
  double translation[3];
} VifPose;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the message of the most recent error on this thread into `buffer`
 * (NUL-terminated, truncated to `length` bytes). Returns the full message
 * length in bytes, excluding the terminator.
 *
 * # Safety
 * `buffer` must point to `length` writable bytes, or be null (query mode).
 */
uintptr_t vif_last_error_message(char *buffer, uintptr_t length);

/**
 * Creates a pipeline. `config_toml` may be null for default settings;
 * otherwise it must be a NUL-terminated TOML document with the same schema
 * as the CLI configuration file. On success `*out` owns the new handle.
 *
 * # Safety
 * `out` must be a valid pointer; `config_toml`, when non-null, must be a
 * NUL-terminated string.
 */
enum VifStatus vif_pipeline_create(struct VifCameraIntrinsics intrinsics,
                                   double imu_rate,
                                   double camera_rate,
                                   const char *config_toml,
                                   struct VifPipeline **out);

/**
 * Destroys a handle created by `vif_pipeline_create`. Null is a no-op.
 *
 * # Safety
 * `pipeline` must be null or a live handle; it must not be used afterwards.
 */
void vif_pipeline_destroy(struct VifPipeline *pipeline);

/**
 * Feeds one IMU sample (timestamp in seconds, accelerometer in m/s^2,
 * gyroscope in rad/s, both in the IMU body frame).
 *
 * # Safety
 * `pipeline` must be a live handle.
 */
enum VifStatus vif_pipeline_push_imu(struct VifPipeline *pipeline,
                                     double timestamp,
                                     double accel_x,
                                     double accel_y,
                                     double accel_z,
                                     double gyro_x,
                                     double gyro_y,
                                     double gyro_z);

/**
 * Feeds one camera frame: row-major grayscale intensity in [0, 255] and
 * metric depth in meters (0 = invalid), both `width * height` floats as
 * configured at creation.
 *
 * # Safety
 * `pipeline` must be a live handle; `intensity` and `depth` must each point
 * to `width * height` readable floats.
 */
enum VifStatus vif_pipeline_push_frame(struct VifPipeline *pipeline,
                                       double timestamp,
                                       const float *intensity,
                                       const float *depth);

/**
 * Writes the current camera-to-world pose estimate into `out`.
 *
 * # Safety
 * `pipeline` must be a live handle and `out` a valid pointer.
 */
enum VifStatus vif_pipeline_pose(const struct VifPipeline *pipeline, struct VifPose *out);

/**
 * Number of frames tracked so far. Returns 0 for a null handle.
 *
 * # Safety
 * `pipeline` must be null or a live handle.
 */
uint64_t vif_pipeline_frame_count(const struct VifPipeline *pipeline);

/**
 * Writes the run-average intensity error (gray levels) into `out`. Returns
 * `Unavailable` before any frame has been tracked against the model.
 *
 * # Safety
 * `pipeline` must be a live handle and `out` a valid pointer.
 */
enum VifStatus vif_pipeline_average_intensity_error(const struct VifPipeline *pipeline,
                                                    double *out);

/**
 * Extracts the current surface mesh and writes it as binary PLY.
 *
 * # Safety
 * `pipeline` must be a live handle; `path` must be a NUL-terminated string.
 */
enum VifStatus vif_pipeline_write_mesh(const struct VifPipeline *pipeline, const char *path);

/**
 * Returns the JSON run report as a newly allocated string, or null on
 * error. Free with `vif_string_free`.
 *
 * # Safety
 * `pipeline` must be null or a live handle.
 */
char *vif_pipeline_report_json(const struct VifPipeline *pipeline);

/**
 * Frees a string returned by this library. Null is a no-op.
 *
 * # Safety
 * `s` must be null or a string returned by this library, freed only once.
 */
void vif_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VIFUSION_H */
