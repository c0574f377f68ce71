//! Iterative reprojection-error minimization over SE(3).
//!
//! Left-multiplicative updates: `p_c' = exp([ω]×)·p_c + v`, so the
//! per-point Jacobian w.r.t. (ω, v) is `dπ/dp_c · [−[p_c]× | I]` where
//! `dπ/dp_c` chains the pinhole and distortion derivatives.

use nalgebra::{Matrix3, Point3, Vector2, Vector3, Vector6};

use crate::geometry::{CameraIntrinsics, Pose, MIN_DEPTH};

/// Default iteration cap for the post-RANSAC polish.
pub const MAX_POLISH_ITERATIONS: usize = 10;

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn total_cost(pose: &Pose, points: &[(Point3<f64>, Vector2<f64>)], intr: &CameraIntrinsics) -> f64 {
    let mut cost = 0.0;
    for (world, pixel) in points {
        match intr.project_camera_point(&pose.transform_point(world)) {
            Ok(projected) => cost += (projected - pixel).norm_squared(),
            Err(_) => return f64::INFINITY,
        }
    }
    cost
}

/// Refines `pose` by Gauss–Newton on the squared pixel reprojection error
/// of the given 3D↔2D pairs. Returns the refined pose; steps that would
/// increase the cost are rolled back and iteration stops.
pub fn gauss_newton_refine(
    pose: &Pose,
    points: &[(Point3<f64>, Vector2<f64>)],
    intr: &CameraIntrinsics,
    max_iterations: usize,
) -> Pose {
    let mut current = pose.clone();
    let mut cost = total_cost(&current, points, intr);
    if !cost.is_finite() {
        return current;
    }
    for _ in 0..max_iterations {
        let mut h = nalgebra::Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for (world, pixel) in points {
            let pc = current.transform_point(world);
            if pc.z <= MIN_DEPTH {
                continue;
            }
            let Ok(projected) = intr.project_camera_point(&pc) else {
                continue;
            };
            let residual = projected - pixel;

            // dπ/dp_c = diag(fx, fy) · J_dist · d(X/Z, Y/Z)/dp_c
            let inv_z = 1.0 / pc.z;
            let xn = pc.x * inv_z;
            let yn = pc.y * inv_z;
            let jd = intr.dist.jacobian(xn, yn);
            let dnorm = nalgebra::Matrix2x3::new(
                inv_z,
                0.0,
                -pc.x * inv_z * inv_z,
                0.0,
                inv_z,
                -pc.y * inv_z * inv_z,
            );
            let jdist = nalgebra::Matrix2::new(jd[0][0], jd[0][1], jd[1][0], jd[1][1]);
            let focal = nalgebra::Matrix2::new(intr.fx, 0.0, 0.0, intr.fy);
            let dpix_dpc = focal * jdist * dnorm;

            let mut jac = nalgebra::Matrix2x6::<f64>::zeros();
            jac.fixed_view_mut::<2, 3>(0, 0)
                .copy_from(&(dpix_dpc * (-skew(&pc.coords))));
            jac.fixed_view_mut::<2, 3>(0, 3).copy_from(&dpix_dpc);

            h += jac.transpose() * jac;
            g += jac.transpose() * residual;
        }
        let Some(step) = h.lu().solve(&(-g)) else {
            break;
        };
        if !step.iter().all(|v| v.is_finite()) {
            break;
        }
        let omega = Vector3::new(step[0], step[1], step[2]);
        let delta_t = Vector3::new(step[3], step[4], step[5]);
        let dr = *nalgebra::Rotation3::new(omega).matrix();
        let candidate_rotation = orthonormalized(dr * current.rotation);
        let candidate = Pose {
            rotation: candidate_rotation,
            translation: dr * current.translation + delta_t,
        };
        let candidate_cost = total_cost(&candidate, points, intr);
        if !candidate_cost.is_finite() || candidate_cost > cost {
            break;
        }
        let converged = step.norm() < 1e-14 || (cost - candidate_cost) < 1e-18 * cost.max(1.0);
        current = candidate;
        cost = candidate_cost;
        if converged {
            break;
        }
    }
    current
}

/// Nearest rotation matrix; composing many small updates drifts slightly
/// off the manifold otherwise.
fn orthonormalized(m: Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => {
            let d = (u * v_t).determinant();
            u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum())) * v_t
        }
        _ => m,
    }
}
