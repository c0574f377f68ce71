//! EPnP pose solver on normalized image coordinates, with a planar
//! homography fallback for flat point configurations.
//!
//! Control points are the centroid plus the principal directions of the
//! 3D points, scaled by the singular extents. The camera-frame control
//! points are recovered from the null space of the projection constraint
//! matrix; the null-space combination weights (betas) are seeded from the
//! closed-form N = 1..3 cases and refined by Gauss–Newton on the
//! inter-control-point distance constraints, exactly as the method is
//! usually implemented. The candidate with the lowest reprojection error
//! wins, and the rigid transform is extracted by Kabsch alignment.

use nalgebra::{Matrix3, Point3, SMatrix, SVector, Vector2, Vector3};
use thiserror::Error;

use crate::geometry::Pose;

#[derive(Debug, Error)]
pub enum PnpError {
    #[error("pnp solver needs at least 4 points, got {0}")]
    TooFewPoints(usize),
    #[error("degenerate point configuration")]
    Degenerate,
    #[error("solver produced a non-finite pose")]
    NonFinite,
}

/// Relative covariance eigenvalue below which the points are treated as
/// coplanar and solved through the homography path.
const PLANAR_EIGENVALUE_RATIO: f64 = 1e-8;

/// Pose from 3D points and their undistorted normalized projections
/// (`x = X/Z`, `y = Y/Z`). Explores every beta seed unless one solves the
/// instance essentially exactly.
pub fn solve_pnp(world: &[Point3<f64>], normalized: &[Vector2<f64>]) -> Result<Pose, PnpError> {
    solve_pnp_impl(world, normalized, 1e-20 * world.len() as f64)
}

/// Fast variant for RANSAC hypotheses: stops at the first candidate whose
/// reprojection is already far below any plausible inlier threshold
/// (~half a pixel at ordinary focal lengths). Consensus scoring judges the
/// hypothesis either way.
pub fn solve_pnp_hypothesis(
    world: &[Point3<f64>],
    normalized: &[Vector2<f64>],
) -> Result<Pose, PnpError> {
    solve_pnp_impl(world, normalized, 1.5e-6 * world.len() as f64)
}

fn solve_pnp_impl(
    world: &[Point3<f64>],
    normalized: &[Vector2<f64>],
    good_enough: f64,
) -> Result<Pose, PnpError> {
    let n = world.len();
    if n < 4 || normalized.len() != n {
        return Err(PnpError::TooFewPoints(n.min(normalized.len())));
    }

    let centroid = world
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + p.coords)
        / n as f64;
    let mut cov = Matrix3::zeros();
    for p in world {
        let d = p.coords - centroid;
        cov += d * d.transpose();
    }
    cov /= n as f64;
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let evs = [
        eig.eigenvalues[order[0]].max(0.0),
        eig.eigenvalues[order[1]].max(0.0),
        eig.eigenvalues[order[2]].max(0.0),
    ];
    if evs[1] <= evs[0] * 1e-12 {
        return Err(PnpError::Degenerate);
    }
    let axes = [
        eig.eigenvectors.column(order[0]).into_owned(),
        eig.eigenvectors.column(order[1]).into_owned(),
        eig.eigenvectors.column(order[2]).into_owned(),
    ];
    if evs[2] <= evs[0] * PLANAR_EIGENVALUE_RATIO {
        return solve_planar(world, normalized, &centroid, &axes);
    }

    // Control points: centroid + principal directions at data scale.
    let mut control_w = [Vector3::zeros(); 4];
    control_w[0] = centroid;
    for j in 0..3 {
        control_w[j + 1] = centroid + axes[j] * evs[j].sqrt();
    }
    let basis = Matrix3::from_columns(&[
        control_w[1] - control_w[0],
        control_w[2] - control_w[0],
        control_w[3] - control_w[0],
    ]);
    let basis_inv = basis.try_inverse().ok_or(PnpError::Degenerate)?;

    let mut alphas = Vec::with_capacity(n);
    for p in world {
        let coeff = basis_inv * (p.coords - control_w[0]);
        alphas.push([1.0 - coeff.x - coeff.y - coeff.z, coeff.x, coeff.y, coeff.z]);
    }

    // Gram matrix of the projection constraints, accumulated row by row so
    // the 2n×12 system never materializes.
    let mut mtm = SMatrix::<f64, 12, 12>::zeros();
    for (a, uv) in alphas.iter().zip(normalized) {
        let mut row_u = [0.0f64; 12];
        let mut row_v = [0.0f64; 12];
        for (j, &alpha) in a.iter().enumerate() {
            row_u[3 * j] = alpha;
            row_u[3 * j + 2] = -uv.x * alpha;
            row_v[3 * j + 1] = alpha;
            row_v[3 * j + 2] = -uv.y * alpha;
        }
        for r in 0..12 {
            for c in r..12 {
                mtm[(r, c)] += row_u[r] * row_u[c] + row_v[r] * row_v[c];
            }
        }
    }
    for r in 0..12 {
        for c in 0..r {
            mtm[(r, c)] = mtm[(c, r)];
        }
    }
    let eig = mtm.symmetric_eigen();
    let mut idx: Vec<usize> = (0..12).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    // Four smallest eigenvectors, each read as four 3D control displacements.
    let mut null_ctrl = [[Vector3::zeros(); 4]; 4];
    for (k, ctrl) in null_ctrl.iter_mut().enumerate() {
        let v = eig.eigenvectors.column(idx[k]);
        for (j, c) in ctrl.iter_mut().enumerate() {
            *c = Vector3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2]);
        }
    }

    // Pairwise squared distances between world control points.
    const PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
    let mut dv = [[Vector3::zeros(); 6]; 4];
    for k in 0..4 {
        for (p, &(i, j)) in PAIRS.iter().enumerate() {
            dv[k][p] = null_ctrl[k][i] - null_ctrl[k][j];
        }
    }
    let dw2: [f64; 6] = std::array::from_fn(|p| {
        let (i, j) = PAIRS[p];
        (control_w[i] - control_w[j]).norm_squared()
    });

    // The closed-form approximations assume the true combination is
    // dominated by the leading null vectors; with few points the null space
    // is wide and its basis ordering arbitrary, so add single-direction
    // seeds to cover the other basins.
    let mut seeds = vec![
        betas_approx_1(&dv, &dw2),
        betas_approx_2(&dv, &dw2),
        betas_approx_3(&dv, &dw2),
    ];
    for k in 1..4 {
        let mut seed = [0.0; 4];
        seed[k] = direction_scale(&dv, &dw2, &[(k, 1.0)]);
        seeds.push(seed);
    }
    {
        let dirs: Vec<(usize, f64)> = (0..4).map(|k| (k, 1.0)).collect();
        let s = direction_scale(&dv, &dw2, &dirs);
        seeds.push([s; 4]);
    }

    let mut best: Option<(f64, Pose)> = None;
    for seed in seeds {
        let betas = gauss_newton_betas(seed, &dv, &dw2);
        let Some((err, pose)) = evaluate_betas(&betas, &null_ctrl, &alphas, world, normalized)
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, pose));
        }
        if best.as_ref().is_some_and(|(e, _)| *e < good_enough) {
            break;
        }
    }
    best.map(|(_, pose)| pose).ok_or(PnpError::NonFinite)
}

fn betas_approx_1(dv: &[[Vector3<f64>; 6]; 4], dw2: &[f64; 6]) -> [f64; 4] {
    [direction_scale(dv, dw2, &[(0, 1.0)]), 0.0, 0.0, 0.0]
}

/// Least-squares scale matching the distance constraints along a fixed
/// combination of null-space directions.
fn direction_scale(
    dv: &[[Vector3<f64>; 6]; 4],
    dw2: &[f64; 6],
    directions: &[(usize, f64)],
) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for p in 0..6 {
        let combined: Vector3<f64> = directions
            .iter()
            .map(|&(k, sign)| dv[k][p] * sign)
            .sum();
        num += combined.norm() * dw2[p].sqrt();
        den += combined.norm_squared();
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

fn betas_approx_2(dv: &[[Vector3<f64>; 6]; 4], dw2: &[f64; 6]) -> [f64; 4] {
    let mut l = SMatrix::<f64, 6, 3>::zeros();
    let mut rho = SVector::<f64, 6>::zeros();
    for p in 0..6 {
        l[(p, 0)] = dv[0][p].norm_squared();
        l[(p, 1)] = 2.0 * dv[0][p].dot(&dv[1][p]);
        l[(p, 2)] = dv[1][p].norm_squared();
        rho[p] = dw2[p];
    }
    let lt = l.transpose();
    let Some(b) = (lt * l).lu().solve(&(lt * rho)) else {
        return [0.0; 4];
    };
    let (b11, b12, b22) = (b[0], b[1], b[2]);
    let mut beta1 = b11.abs().sqrt();
    let beta2 = if b11 * b22 >= 0.0 { b22.abs().sqrt() } else { 0.0 };
    if b12 < 0.0 {
        beta1 = -beta1;
    }
    [beta1, beta2, 0.0, 0.0]
}

fn betas_approx_3(dv: &[[Vector3<f64>; 6]; 4], dw2: &[f64; 6]) -> [f64; 4] {
    let mut l = SMatrix::<f64, 6, 5>::zeros();
    let mut rho = SVector::<f64, 6>::zeros();
    for p in 0..6 {
        l[(p, 0)] = dv[0][p].norm_squared();
        l[(p, 1)] = 2.0 * dv[0][p].dot(&dv[1][p]);
        l[(p, 2)] = dv[1][p].norm_squared();
        l[(p, 3)] = 2.0 * dv[0][p].dot(&dv[2][p]);
        l[(p, 4)] = 2.0 * dv[1][p].dot(&dv[2][p]);
        rho[p] = dw2[p];
    }
    let lt = l.transpose();
    let Some(b) = (lt * l).lu().solve(&(lt * rho)) else {
        return [0.0; 4];
    };
    let mut beta1 = b[0].abs().sqrt();
    let beta2 = if b[0] * b[2] >= 0.0 { b[2].abs().sqrt() } else { 0.0 };
    if b[1] < 0.0 {
        beta1 = -beta1;
    }
    let beta3 = if beta1 != 0.0 { b[3] / beta1 } else { 0.0 };
    [beta1, beta2, beta3, 0.0]
}

/// Refines the full 4-vector of betas on the six distance constraints.
fn gauss_newton_betas(
    mut betas: [f64; 4],
    dv: &[[Vector3<f64>; 6]; 4],
    dw2: &[f64; 6],
) -> [f64; 4] {
    for _ in 0..8 {
        let mut jtj = nalgebra::Matrix4::<f64>::zeros();
        let mut jtr = nalgebra::Vector4::<f64>::zeros();
        for p in 0..6 {
            let combined: Vector3<f64> = (0..4).map(|k| dv[k][p] * betas[k]).sum();
            let residual = combined.norm_squared() - dw2[p];
            let grad =
                nalgebra::Vector4::from_fn(|k, _| 2.0 * combined.dot(&dv[k][p]));
            jtj += grad * grad.transpose();
            jtr += grad * residual;
        }
        let Some(step) = jtj.lu().solve(&jtr) else {
            break;
        };
        if !step.iter().all(|v| v.is_finite()) {
            break;
        }
        for k in 0..4 {
            betas[k] -= step[k];
        }
        if step.norm() < 1e-14 {
            break;
        }
    }
    betas
}

/// Reconstructs camera-frame points from betas and scores the candidate by
/// total squared reprojection error in normalized coordinates.
fn evaluate_betas(
    betas: &[f64; 4],
    null_ctrl: &[[Vector3<f64>; 4]; 4],
    alphas: &[[f64; 4]],
    world: &[Point3<f64>],
    normalized: &[Vector2<f64>],
) -> Option<(f64, Pose)> {
    let mut control_c = [Vector3::zeros(); 4];
    for (j, cc) in control_c.iter_mut().enumerate() {
        for k in 0..4 {
            *cc += null_ctrl[k][j] * betas[k];
        }
    }
    let mut camera: Vec<Vector3<f64>> = alphas
        .iter()
        .map(|a| {
            let mut p = Vector3::zeros();
            for (j, &alpha) in a.iter().enumerate() {
                p += control_c[j] * alpha;
            }
            p
        })
        .collect();
    // The null space is sign-ambiguous; keep the object in front.
    let negative_depth = camera.iter().filter(|p| p.z < 0.0).count();
    if negative_depth * 2 > camera.len() {
        for p in camera.iter_mut() {
            *p = -*p;
        }
    }
    let pose = kabsch(world, &camera).ok()?;
    let mut err = 0.0;
    for (w, uv) in world.iter().zip(normalized) {
        let pc = pose.transform_point(w);
        if pc.z <= 1e-12 {
            err += 1e12;
            continue;
        }
        err += (pc.x / pc.z - uv.x).powi(2) + (pc.y / pc.z - uv.y).powi(2);
    }
    err.is_finite().then_some((err, pose))
}

/// Rigid alignment mapping `world` onto `camera` in the least-squares sense.
fn kabsch(world: &[Point3<f64>], camera: &[Vector3<f64>]) -> Result<Pose, PnpError> {
    let n = world.len() as f64;
    let cw = world.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let cc = camera.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut h = Matrix3::zeros();
    for (w, c) in world.iter().zip(camera) {
        h += (c - cc) * (w.coords - cw).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.ok_or(PnpError::NonFinite)?;
    let v_t = svd.v_t.ok_or(PnpError::NonFinite)?;
    let d = (u * v_t).determinant();
    let mut r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum())) * v_t;
    // Re-orthonormalize against accumulated round-off.
    let svd = r.svd(true, true);
    if let (Some(u), Some(v_t)) = (svd.u, svd.v_t) {
        let d = (u * v_t).determinant();
        r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum())) * v_t;
    }
    let t = cc - r * cw;
    Pose::new(r, t).map_err(|_| PnpError::NonFinite)
}

/// Pose for coplanar points via a plane-to-image homography.
fn solve_planar(
    world: &[Point3<f64>],
    normalized: &[Vector2<f64>],
    centroid: &Vector3<f64>,
    axes: &[Vector3<f64>; 3],
) -> Result<Pose, PnpError> {
    let e0 = axes[0];
    let e1 = axes[1];
    let plane_normal = e0.cross(&e1);
    let plane: Vec<Vector2<f64>> = world
        .iter()
        .map(|w| {
            let d = w.coords - centroid;
            Vector2::new(d.dot(&e0), d.dot(&e1))
        })
        .collect();
    let h = homography_dlt(&plane, normalized).ok_or(PnpError::Degenerate)?;
    let h1 = h.column(0).into_owned();
    let h2 = h.column(1).into_owned();
    let h3 = h.column(2).into_owned();
    let norm = (h1.norm() + h2.norm()) / 2.0;
    if norm <= 1e-15 {
        return Err(PnpError::Degenerate);
    }
    let mut scale = 1.0 / norm;
    // The plane origin sits at depth t.z; keep it in front of the camera.
    if (scale * h3).z < 0.0 {
        scale = -scale;
    }
    let r1 = h1 * scale;
    let r2 = h2 * scale;
    let r3 = r1.cross(&r2);
    let approx = Matrix3::from_columns(&[r1, r2, r3]);
    let svd = approx.svd(true, true);
    let u = svd.u.ok_or(PnpError::NonFinite)?;
    let v_t = svd.v_t.ok_or(PnpError::NonFinite)?;
    let d = (u * v_t).determinant();
    let r0 = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum())) * v_t;
    let t_plane = h3 * scale;

    let basis = Matrix3::from_columns(&[e0, e1, plane_normal]);
    let rotation = r0 * basis.transpose();
    let translation = t_plane - rotation * centroid;
    Pose::new(rotation, translation).map_err(|_| PnpError::NonFinite)
}

/// Direct linear transform homography from plane coordinates to normalized
/// image coordinates, with Hartley normalization on both sides.
fn homography_dlt(
    plane: &[Vector2<f64>],
    image: &[Vector2<f64>],
) -> Option<Matrix3<f64>> {
    if plane.len() < 4 {
        return None;
    }
    let (tp, plane_n) = hartley_normalize(plane)?;
    let (ti, image_n) = hartley_normalize(image)?;
    // Null vector via the Gram matrix; a thin SVD of the 8×9 minimal system
    // would not expose the 9th right-singular vector at all.
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for (p, q) in plane_n.iter().zip(&image_n) {
        let (x, y) = (p.x, p.y);
        let (u, v) = (q.x, q.y);
        let row_u = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let row_v = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for r in 0..9 {
            for c in r..9 {
                ata[(r, c)] += row_u[r] * row_u[c] + row_v[r] * row_v[c];
            }
        }
    }
    for r in 0..9 {
        for c in 0..r {
            ata[(r, c)] = ata[(c, r)];
        }
    }
    let eig = ata.symmetric_eigen();
    let mut smallest = 0;
    for i in 1..9 {
        if eig.eigenvalues[i] < eig.eigenvalues[smallest] {
            smallest = i;
        }
    }
    let h = eig.eigenvectors.column(smallest);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let ti_inv = ti.try_inverse()?;
    Some(ti_inv * hn * tp)
}

fn hartley_normalize(points: &[Vector2<f64>]) -> Option<(Matrix3<f64>, Vec<Vector2<f64>>)> {
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let mean_dist = points.iter().map(|p| (p - mean).norm()).sum::<f64>() / n;
    if mean_dist <= 1e-15 {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    let t = Matrix3::new(s, 0.0, -s * mean.x, 0.0, s, -s * mean.y, 0.0, 0.0, 1.0);
    let normalized = points.iter().map(|p| (p - mean) * s).collect();
    Some((t, normalized))
}
