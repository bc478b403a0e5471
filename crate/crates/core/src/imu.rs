//! IMU pre-integration: compresses the inertial samples between two camera
//! frames into relative rotation / velocity / translation increments used by
//! the Kalman prediction step.

use nalgebra::{Matrix3, SMatrix, Vector3};
use thiserror::Error;

use crate::frame::ImuSample;
use crate::geometry::{rotation_exp, skew, Pose};

#[derive(Debug, Error, PartialEq)]
pub enum PreintegrationError {
    #[error("no IMU samples in the integration window")]
    EmptySamples,
    #[error("IMU timestamps not strictly increasing")]
    NonMonotonicTimestamps,
}

/// Accumulated inter-frame increments, expressed for the camera frame.
///
/// `delta_rotation` is the body-frame rotation increment
/// `R_prev^-1 * R_curr`; translation and velocity deltas are world-frame
/// differences. The `rotating_*` fields isolate the accelerometer-driven
/// parts, which co-rotate with a perturbation of the starting attitude; they
/// feed the propagation Jacobian.
#[derive(Debug, Clone)]
pub struct PreintegratedDelta {
    pub delta_rotation: Matrix3<f64>,
    pub delta_velocity: Vector3<f64>,
    pub delta_translation: Vector3<f64>,
    pub duration: f64,
    pub sample_count: usize,
    pub rotating_dv: Vector3<f64>,
    pub rotating_dt: Vector3<f64>,
}

impl PreintegratedDelta {
    /// Delta of a camera that did not move (used for the no-IMU ablation).
    pub fn identity(duration: f64) -> Self {
        Self {
            delta_rotation: Matrix3::identity(),
            delta_velocity: Vector3::zeros(),
            delta_translation: Vector3::zeros(),
            duration,
            sample_count: 1,
            rotating_dv: Vector3::zeros(),
            rotating_dt: Vector3::zeros(),
        }
    }
}

/// Discrete world-frame integration of the samples in `[t_start, t_end]`.
///
/// Each sample is held constant from its timestamp until the next one (the
/// first one is extended back to `t_start`, the last forward to `t_end`).
/// `imu_extrinsic` maps IMU coordinates to camera coordinates and is applied
/// so the increments describe the camera frame.
pub fn preintegrate(
    samples: &[ImuSample],
    t_start: f64,
    t_end: f64,
    imu_extrinsic: &Pose,
    gravity: &Vector3<f64>,
    v_prev: &Vector3<f64>,
    rot_prev: &Matrix3<f64>,
) -> Result<PreintegratedDelta, PreintegrationError> {
    if samples.is_empty() {
        return Err(PreintegrationError::EmptySamples);
    }
    if samples.windows(2).any(|w| w[1].timestamp <= w[0].timestamp) {
        return Err(PreintegrationError::NonMonotonicTimestamps);
    }

    let phi_r = imu_extrinsic.rotation;
    let phi_t = imu_extrinsic.translation;
    // camera = imu * phi^-1, so the camera origin sits at -phi_r^T phi_t in
    // IMU coordinates.
    let q = -(phi_r.transpose() * phi_t);

    let mut r_imu = rot_prev * phi_r;
    let r_imu_start = r_imu;
    let mut v = *v_prev;
    let mut p = Vector3::zeros();
    // accelerometer-driven (attitude-rotating) parts
    let mut acc_v = Vector3::zeros();
    let mut acc_p = Vector3::zeros();
    // gravity double integral
    let mut grav_v = Vector3::zeros();
    let mut grav_p = Vector3::zeros();

    let mut clock = t_start;
    for (n, s) in samples.iter().enumerate() {
        let hold_until = if n + 1 < samples.len() { samples[n + 1].timestamp } else { t_end };
        let tau = hold_until - clock;
        clock = hold_until;
        if tau <= 0.0 {
            continue;
        }
        let a_world = r_imu * s.accel;
        acc_p += acc_v * tau + 0.5 * a_world * tau * tau;
        acc_v += a_world * tau;
        grav_p += grav_v * tau + 0.5 * gravity * tau * tau;
        grav_v += gravity * tau;
        p += v * tau + 0.5 * (a_world + gravity) * tau * tau;
        v += (a_world + gravity) * tau;
        r_imu *= rotation_exp(&(s.gyro * tau));
    }

    let duration = t_end - t_start;
    let r_cam_end = r_imu * phi_r.transpose();
    let delta_rotation =
        Pose::new(rot_prev.transpose() * r_cam_end, Vector3::zeros()).orthonormalized().rotation;
    // camera displacement: IMU displacement plus the rotated lever arm
    let delta_translation = p + (r_imu - r_imu_start) * q;
    let delta_velocity = v - v_prev;

    Ok(PreintegratedDelta {
        delta_rotation,
        delta_velocity,
        delta_translation,
        duration,
        sample_count: samples.len(),
        rotating_dv: delta_velocity - grav_v,
        rotating_dt: delta_translation - v_prev * duration - grav_p,
    })
}

/// Apply an increment to a (pose, velocity) state.
pub fn predict_pose(pose: &Pose, velocity: &Vector3<f64>, delta: &PreintegratedDelta) -> (Pose, Vector3<f64>) {
    let rotation = (pose.rotation * delta.delta_rotation).into();
    let pose_out = Pose::new(rotation, pose.translation + delta.delta_translation)
        .orthonormalized();
    (pose_out, velocity + delta.delta_velocity)
}

/// Jacobian of the propagation map with respect to the 9-dim error state
/// `[dtheta, dt, dv]` (left-multiplicative rotation perturbation). Holds for
/// the map that re-integrates the same raw samples from a perturbed start
/// state.
pub fn propagation_jacobian(delta: &PreintegratedDelta) -> SMatrix<f64, 9, 9> {
    let mut f = SMatrix::<f64, 9, 9>::identity();
    // translation row: depends on the rotating part of dt and on velocity
    f.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-skew(&delta.rotating_dt)));
    f.fixed_view_mut::<3, 3>(3, 6)
        .copy_from(&(Matrix3::identity() * delta.duration));
    // velocity row
    f.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-skew(&delta.rotating_dv)));
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{imu_at, Trajectory};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    const G: f64 = -9.81;

    fn gravity() -> Vector3<f64> {
        Vector3::new(0.0, 0.0, G)
    }

    fn static_samples(rot: &Matrix3<f64>, n: usize, tau: f64) -> Vec<ImuSample> {
        (0..n)
            .map(|i| ImuSample {
                timestamp: i as f64 * tau,
                accel: -(rot.transpose() * gravity()),
                gyro: Vector3::zeros(),
            })
            .collect()
    }

    #[test]
    fn static_samples_cancel_gravity() {
        let rot = rotation_exp(&Vector3::new(0.2, -0.4, 0.1));
        let samples = static_samples(&rot, 50, 0.005);
        let d = preintegrate(
            &samples,
            0.0,
            0.25,
            &Pose::identity(),
            &gravity(),
            &Vector3::zeros(),
            &rot,
        )
        .unwrap();
        assert!((d.delta_rotation - Matrix3::identity()).abs().max() < 1e-10);
        assert!(d.delta_velocity.norm() < 1e-10);
        assert!(d.delta_translation.norm() < 1e-10);
        assert_eq!(d.sample_count, 50);
        assert!((d.duration - 0.25).abs() < 1e-12);
    }

    #[test]
    fn constant_rate_rotation_closed_form() {
        let samples: Vec<ImuSample> = (0..100)
            .map(|i| ImuSample {
                timestamp: i as f64 * 0.005,
                accel: -gravity(),
                gyro: Vector3::new(0.0, 0.0, 1.0),
            })
            .collect();
        let d = preintegrate(
            &samples,
            0.0,
            0.5,
            &Pose::identity(),
            &gravity(),
            &Vector3::zeros(),
            &Matrix3::identity(),
        )
        .unwrap();
        let expected = rotation_exp(&Vector3::new(0.0, 0.0, 0.5));
        assert!((d.delta_rotation - expected).abs().max() < 1e-6);
    }

    #[test]
    fn errors_on_empty_and_non_monotonic() {
        let e = preintegrate(
            &[],
            0.0,
            0.1,
            &Pose::identity(),
            &gravity(),
            &Vector3::zeros(),
            &Matrix3::identity(),
        );
        assert_eq!(e.unwrap_err(), PreintegrationError::EmptySamples);

        let samples = vec![
            ImuSample { timestamp: 0.1, accel: Vector3::zeros(), gyro: Vector3::zeros() },
            ImuSample { timestamp: 0.05, accel: Vector3::zeros(), gyro: Vector3::zeros() },
        ];
        let e = preintegrate(
            &samples,
            0.0,
            0.2,
            &Pose::identity(),
            &gravity(),
            &Vector3::zeros(),
            &Matrix3::identity(),
        );
        assert_eq!(e.unwrap_err(), PreintegrationError::NonMonotonicTimestamps);
    }

    fn gentle_random_trajectory(rng: &mut StdRng) -> Trajectory {
        Trajectory::Sinusoid {
            position: [0.0; 3],
            rotation: [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)],
            trans_amplitude: [
                rng.gen_range(0.0..0.01),
                rng.gen_range(0.0..0.01),
                rng.gen_range(0.0..0.01),
            ],
            trans_frequency: [
                rng.gen_range(0.05..0.2),
                rng.gen_range(0.05..0.2),
                rng.gen_range(0.05..0.2),
            ],
            trans_phase: [rng.gen_range(0.0..6.28); 3],
            rot_axis: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 1.0],
            rot_amplitude: rng.gen_range(0.0..0.01),
            rot_frequency: rng.gen_range(0.05..0.2),
        }
    }

    fn samples_from_trajectory(traj: &Trajectory, rate: f64, t0: f64, t1: f64) -> Vec<ImuSample> {
        let n = ((t1 - t0) * rate).round() as usize;
        (0..n)
            .map(|i| {
                let t = t0 + i as f64 / rate;
                let (gyro, accel) = imu_at(traj, &gravity(), t);
                ImuSample { timestamp: t, accel, gyro }
            })
            .collect()
    }

    /// Dense first-order Euler integration of the analytic IMU signal.
    fn dense_euler(
        traj: &Trajectory,
        t0: f64,
        t1: f64,
        rate: f64,
    ) -> (Matrix3<f64>, Vector3<f64>, Vector3<f64>) {
        let g = gravity();
        let n = ((t1 - t0) * rate).round() as usize;
        let dt = (t1 - t0) / n as f64;
        let mut r = traj.pose(t0).rotation;
        let mut v = traj.linear_velocity(t0);
        let mut p = Vector3::zeros();
        for i in 0..n {
            let t = t0 + i as f64 * dt;
            let (gyro, accel) = imu_at(traj, &g, t);
            let a_world = r * accel + g;
            p += v * dt + 0.5 * a_world * dt * dt;
            v += a_world * dt;
            r *= rotation_exp(&(gyro * dt));
        }
        (r, v, p)
    }

    #[test]
    fn matches_dense_integration_oracle() {
        let mut rng = StdRng::seed_from_u64(101);
        for _ in 0..20 {
            let traj = gentle_random_trajectory(&mut rng);
            let samples = samples_from_trajectory(&traj, 200.0, 0.0, 0.1);
            let r0 = traj.pose(0.0).rotation;
            let v0 = traj.linear_velocity(0.0);
            let d = preintegrate(&samples, 0.0, 0.1, &Pose::identity(), &gravity(), &v0, &r0)
                .unwrap();
            let (r_dense, v_dense, p_dense) = dense_euler(&traj, 0.0, 0.1, 20_000.0);
            let r_pre = r0 * d.delta_rotation;
            let rot_err = crate::geometry::rotation_log(
                &(r_pre.transpose() * r_dense),
            )
            .norm();
            assert!(rot_err < 1e-5, "rotation error {rot_err}");
            assert!((d.delta_translation - p_dense).norm() < 1e-5);
            assert!((v0 + d.delta_velocity - v_dense).norm() < 1e-4);
        }
    }

    #[test]
    fn concatenation_consistency() {
        let mut rng = StdRng::seed_from_u64(55);
        let traj = gentle_random_trajectory(&mut rng);
        let r0 = traj.pose(0.0).rotation;
        let v0 = traj.linear_velocity(0.0);
        let pose0 = Pose::new(r0, Vector3::new(0.5, -0.2, 1.0));

        // one shot over [0, 0.2]
        let all = samples_from_trajectory(&traj, 400.0, 0.0, 0.2);
        let d_all =
            preintegrate(&all, 0.0, 0.2, &Pose::identity(), &gravity(), &v0, &r0).unwrap();
        let (pose_a, vel_a) = predict_pose(&pose0, &v0, &d_all);

        // two halves chained
        let first: Vec<_> = all.iter().copied().filter(|s| s.timestamp < 0.1).collect();
        let second: Vec<_> = all.iter().copied().filter(|s| s.timestamp >= 0.1).collect();
        let d1 = preintegrate(&first, 0.0, 0.1, &Pose::identity(), &gravity(), &v0, &r0).unwrap();
        let (pose_m, vel_m) = predict_pose(&pose0, &v0, &d1);
        let d2 = preintegrate(
            &second,
            0.1,
            0.2,
            &Pose::identity(),
            &gravity(),
            &vel_m,
            &pose_m.rotation,
        )
        .unwrap();
        let (pose_b, vel_b) = predict_pose(&pose_m, &vel_m, &d2);

        assert!((pose_a.rotation - pose_b.rotation).abs().max() < 1e-8);
        assert!((pose_a.translation - pose_b.translation).norm() < 1e-8);
        assert!((vel_a - vel_b).norm() < 1e-8);
    }

    #[test]
    fn delta_rotation_stays_orthonormal() {
        let mut rng = StdRng::seed_from_u64(77);
        let samples: Vec<ImuSample> = (0..500)
            .map(|i| ImuSample {
                timestamp: i as f64 * 0.002,
                accel: Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), 9.0),
                gyro: Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)),
            })
            .collect();
        let d = preintegrate(
            &samples,
            0.0,
            1.0,
            &Pose::identity(),
            &gravity(),
            &Vector3::zeros(),
            &Matrix3::identity(),
        )
        .unwrap();
        let p = Pose::new(d.delta_rotation, Vector3::zeros());
        assert!(p.orthonormality_error() < 1e-9);
    }

    #[test]
    fn gravity_contribution_is_linear_in_g() {
        // static samples for fixed duration: doubling g doubles the gravity
        // part of delta_t
        let rot = Matrix3::identity();
        let n = 100;
        let tau = 0.005;
        let make = |scale: f64| {
            let g = gravity() * scale;
            let samples: Vec<ImuSample> = (0..n)
                .map(|i| ImuSample {
                    timestamp: i as f64 * tau,
                    // accelerometer reads the reaction of single gravity only;
                    // imbalance leaves a net (scale-1) g pull
                    accel: -(rot.transpose() * gravity()),
                    gyro: Vector3::zeros(),
                })
                .collect();
            preintegrate(&samples, 0.0, n as f64 * tau, &Pose::identity(), &g, &Vector3::zeros(), &rot)
                .unwrap()
        };
        let d1 = make(2.0); // net pull of 1 g
        let d2 = make(3.0); // net pull of 2 g
        let g1 = d1.delta_translation;
        let g2 = d2.delta_translation;
        assert!((g2 - 2.0 * g1).norm() < 1e-10);
    }

    #[test]
    fn identity_delta_prediction_is_neutral() {
        let pose = Pose::new(rotation_exp(&Vector3::new(0.1, 0.2, 0.3)), Vector3::new(1.0, 2.0, 3.0));
        let vel = Vector3::new(0.1, -0.1, 0.0);
        let (p2, v2) = predict_pose(&pose, &vel, &PreintegratedDelta::identity(0.033));
        assert!((p2.rotation - pose.rotation).abs().max() < 1e-12);
        assert!((p2.translation - pose.translation).norm() < 1e-12);
        assert_eq!(v2, vel);
    }

    #[test]
    fn chained_prediction_follows_ground_truth() {
        // 30 frames at 30 Hz with 1 kHz IMU on a gentle trajectory
        let traj = Trajectory::Sinusoid {
            position: [0.0; 3],
            rotation: [0.0; 3],
            trans_amplitude: [0.05, 0.04, 0.03],
            trans_frequency: [0.4, 0.5, 0.3],
            trans_phase: [0.0, 1.0, 2.0],
            rot_axis: [0.0, 0.0, 1.0],
            rot_amplitude: 0.05,
            rot_frequency: 0.4,
        };
        let mut pose = traj.pose(0.0);
        let mut vel = traj.linear_velocity(0.0);
        let frame_dt = 1.0 / 30.0;
        for k in 0..30 {
            let (t0, t1) = (k as f64 * frame_dt, (k + 1) as f64 * frame_dt);
            let samples = samples_from_trajectory(&traj, 1000.0, t0, t1);
            let d = preintegrate(&samples, t0, t1, &Pose::identity(), &gravity(), &vel, &pose.rotation)
                .unwrap();
            (pose, vel) = predict_pose(&pose, &vel, &d);
        }
        let gt = traj.pose(1.0);
        let err = (pose.translation - gt.translation).norm();
        assert!(err < 1e-3, "drift {err}");
    }

    /// Finite-difference oracle for the propagation Jacobian: re-integrate
    /// the same raw samples from a perturbed start state and compare the
    /// resulting error with `F dx`.
    #[test]
    fn propagation_jacobian_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(41);
        for _ in 0..5 {
            let samples: Vec<ImuSample> = (0..40)
                .map(|i| ImuSample {
                    timestamp: i as f64 * 0.005,
                    accel: Vector3::new(
                        rng.gen_range(-3.0..3.0),
                        rng.gen_range(-3.0..3.0),
                        rng.gen_range(5.0..12.0),
                    ),
                    gyro: Vector3::new(
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                    ),
                })
                .collect();
            let (t0, t1) = (0.0, 0.2);
            let rot = rotation_exp(&Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            ));
            let pos = Vector3::new(0.3, -0.2, 0.1);
            let vel = Vector3::new(0.2, 0.1, -0.3);
            let extr = Pose::new(
                rotation_exp(&Vector3::new(0.1, -0.05, 0.2)),
                Vector3::new(0.02, -0.01, 0.03),
            );

            let run = |rot_s: &Matrix3<f64>, pos_s: &Vector3<f64>, vel_s: &Vector3<f64>| {
                let d = preintegrate(&samples, t0, t1, &extr, &gravity(), vel_s, rot_s).unwrap();
                predict_pose(&Pose::new(*rot_s, *pos_s), vel_s, &d)
            };
            let (pose_nom, vel_nom) = run(&rot, &pos, &vel);
            let delta = preintegrate(&samples, t0, t1, &extr, &gravity(), &vel, &rot).unwrap();
            let f = propagation_jacobian(&delta);

            let h = 1e-6;
            for c in 0..9 {
                let mut dx = [0.0f64; 9];
                dx[c] = h;
                let dtheta = Vector3::new(dx[0], dx[1], dx[2]);
                let dt = Vector3::new(dx[3], dx[4], dx[5]);
                let dv = Vector3::new(dx[6], dx[7], dx[8]);
                let rot_p = rotation_exp(&dtheta) * rot;
                let (pose_p, vel_p) = run(&rot_p, &(pos + dt), &(vel + dv));
                let (e_theta, e_t) = pose_p.boxminus(&pose_nom);
                let e_v = vel_p - vel_nom;
                for r in 0..9 {
                    let got = match r {
                        0..=2 => e_theta[r] / h,
                        3..=5 => e_t[r - 3] / h,
                        _ => e_v[r - 6] / h,
                    };
                    assert!(
                        (got - f[(r, c)]).abs() < 1e-4,
                        "F[{r},{c}]: fd {got} analytic {}",
                        f[(r, c)]
                    );
                }
            }
        }
    }
}
