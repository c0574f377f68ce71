//! Rigid-body poses, camera projection, rotation metrics, and the 3D object model.
//!
//! Everything downstream (decoding, PnP, metrics) is built on these types.
//! Conventions:
//!
//! - A [`Pose`] maps object-frame points into the camera frame: `p_c = R p + t`.
//! - Pixels follow image convention: u right, v down, origin at the top-left.
//! - Euler angles are Z-Y-X intrinsic (yaw, then pitch, then roll).

use std::path::Path;

use nalgebra::{Matrix3, Point3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Orthonormality tolerance enforced on rotation matrices.
pub const ROTATION_TOL: f64 = 1e-9;

/// Depth below which a camera-frame point cannot be projected.
pub const MIN_DEPTH: f64 = 1e-9;

/// Pitch margin (radians) around ±π/2 where the yaw/roll split degenerates.
pub const GIMBAL_LOCK_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("camera-frame depth {0} is not positive")]
    NonPositiveDepth(f64),
    #[error("rotation matrix is not orthonormal with determinant +1 within {ROTATION_TOL}")]
    InvalidRotation,
    #[error("translation has non-finite components")]
    NonFiniteTranslation,
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid object model: {0}")]
    InvalidModel(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

// ── Pose ────────────────────────────────────────────────────────────────────

/// Rigid transform from object frame to camera frame.
///
/// `rotation` is orthonormal with determinant +1 within [`ROTATION_TOL`];
/// `translation` is in meters. Serialized as a row-major 3×3 array plus a
/// 3-vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if !is_rotation(&rotation) {
            return Err(GeometryError::InvalidRotation);
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFiniteTranslation);
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Pose with the given Euler orientation and translation.
    pub fn from_euler(angles: &EulerAngles, translation: Vector3<f64>) -> Self {
        Self {
            rotation: euler_compose(angles),
            translation,
        }
    }

    #[inline]
    pub fn transform_point(&self, point: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * point.coords + self.translation)
    }

    pub fn is_valid(&self) -> bool {
        is_rotation(&self.rotation) && self.translation.iter().all(|v| v.is_finite())
    }
}

/// Checks orthonormality and determinant +1 within [`ROTATION_TOL`].
pub fn is_rotation(m: &Matrix3<f64>) -> bool {
    if !m.iter().all(|v| v.is_finite()) {
        return false;
    }
    let residual = m.transpose() * m - Matrix3::identity();
    residual.amax() <= ROTATION_TOL && (m.determinant() - 1.0).abs() <= ROTATION_TOL
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let r = &self.rotation;
        PoseRepr {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [self.translation.x, self.translation.y, self.translation.z],
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = PoseRepr::deserialize(deserializer)?;
        let r = repr.rotation;
        let rotation = Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        );
        let translation = Vector3::from(repr.translation);
        Pose::new(rotation, translation).map_err(serde::de::Error::custom)
    }
}

// ── Camera model ────────────────────────────────────────────────────────────

/// Brown–Conrady distortion coefficients, all zero by default.
///
/// Serialized as the 5-array `[k1, k2, p1, p2, k3]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 5]", into = "[f64; 5]")]
pub struct Distortion {
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
    pub k3: f64,
}

impl From<[f64; 5]> for Distortion {
    fn from(d: [f64; 5]) -> Self {
        Self {
            k1: d[0],
            k2: d[1],
            p1: d[2],
            p2: d[3],
            k3: d[4],
        }
    }
}

impl From<Distortion> for [f64; 5] {
    fn from(d: Distortion) -> Self {
        [d.k1, d.k2, d.p1, d.p2, d.k3]
    }
}

impl Distortion {
    pub fn is_zero(&self) -> bool {
        *self == Self::default()
    }

    /// Applies distortion to normalized camera coordinates.
    pub fn distort(&self, x: f64, y: f64) -> (f64, f64) {
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
        let xd = x * radial + 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x);
        let yd = y * radial + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y;
        (xd, yd)
    }

    /// Inverts [`Self::distort`] by fixed-point iteration.
    ///
    /// Exact for zero distortion; converges to well under a hundredth of a
    /// pixel for the mild coefficients this engine deals with.
    pub fn undistort(&self, xd: f64, yd: f64) -> (f64, f64) {
        if self.is_zero() {
            return (xd, yd);
        }
        let (mut x, mut y) = (xd, yd);
        for _ in 0..10 {
            let r2 = x * x + y * y;
            let radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
            let dx = 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x);
            let dy = self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y;
            x = (xd - dx) / radial;
            y = (yd - dy) / radial;
        }
        (x, y)
    }

    /// Jacobian of the distorted coordinates w.r.t. the undistorted ones.
    pub fn jacobian(&self, x: f64, y: f64) -> [[f64; 2]; 2] {
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
        // d(radial)/d(r2)
        let dr = self.k1 + r2 * (2.0 * self.k2 + 3.0 * self.k3 * r2);
        let dxdx = radial + 2.0 * x * x * dr + 2.0 * self.p1 * y + 6.0 * self.p2 * x;
        let dxdy = 2.0 * x * y * dr + 2.0 * self.p1 * x + 2.0 * self.p2 * y;
        let dydx = 2.0 * x * y * dr + 2.0 * self.p1 * x + 2.0 * self.p2 * y;
        let dydy = radial + 2.0 * y * y * dr + 6.0 * self.p1 * y + 2.0 * self.p2 * x;
        [[dxdx, dxdy], [dydx, dydy]]
    }
}

/// Pinhole intrinsics with Brown–Conrady distortion.
///
/// Matches the JSON interchange format
/// `{"fx", "fy", "cx", "cy", "width", "height", "dist": [k1,k2,p1,p2,k3]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub dist: Distortion,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            dist: Distortion::default(),
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cx={} outside (0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cy={} outside (0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        let text = std::fs::read_to_string(path).map_err(|source| GeometryError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let intr: Self = serde_json::from_str(&text).map_err(|source| GeometryError::Json {
            path: path.display().to_string(),
            source,
        })?;
        intr.validate()?;
        Ok(intr)
    }

    pub fn save(&self, path: &Path) -> Result<(), GeometryError> {
        let text = serde_json::to_string_pretty(self).expect("intrinsics serialize");
        std::fs::write(path, text).map_err(|source| GeometryError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Projects a camera-frame point to distorted pixel coordinates.
    pub fn project_camera_point(&self, pc: &Point3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if pc.z <= MIN_DEPTH {
            return Err(GeometryError::NonPositiveDepth(pc.z));
        }
        let (xd, yd) = self.dist.distort(pc.x / pc.z, pc.y / pc.z);
        Ok(Vector2::new(self.fx * xd + self.cx, self.fy * yd + self.cy))
    }

    /// Undistorted normalized camera coordinates for a pixel.
    pub fn normalized_from_pixel(&self, pixel: &Vector2<f64>) -> Vector2<f64> {
        let xd = (pixel.x - self.cx) / self.fx;
        let yd = (pixel.y - self.cy) / self.fy;
        let (x, y) = self.dist.undistort(xd, yd);
        Vector2::new(x, y)
    }
}

/// Projects an object-frame point through a pose into pixel coordinates.
///
/// With zero distortion this is the plain pinhole model
/// `u = fx·X/Z + cx`, `v = fy·Y/Z + cy` on the camera-frame point.
pub fn project(
    point: &Point3<f64>,
    pose: &Pose,
    intr: &CameraIntrinsics,
) -> Result<Vector2<f64>, GeometryError> {
    intr.project_camera_point(&pose.transform_point(point))
}

// ── Object model ────────────────────────────────────────────────────────────

/// The tracked object as its eight bounding-box corners, in meters.
///
/// `diameter` is the maximum pairwise corner distance and is validated
/// against the corners on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectModel {
    pub name: String,
    pub corners: [Point3<f64>; 8],
    pub diameter: f64,
}

/// Maximum pairwise distance between the given points.
pub fn max_pairwise_distance(points: &[Point3<f64>]) -> f64 {
    let mut best: f64 = 0.0;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            best = best.max((points[i] - points[j]).norm());
        }
    }
    best
}

impl ObjectModel {
    /// Builds a model from its corners, computing the diameter.
    pub fn from_corners(
        name: impl Into<String>,
        corners: [Point3<f64>; 8],
    ) -> Result<Self, GeometryError> {
        let model = Self {
            name: name.into(),
            corners,
            diameter: max_pairwise_distance(&corners),
        };
        model.validate()?;
        Ok(model)
    }

    /// Axis-aligned box of the given extents, centered at the origin.
    pub fn centered_box(
        name: impl Into<String>,
        length: f64,
        width: f64,
        height: f64,
    ) -> Result<Self, GeometryError> {
        let (hx, hy, hz) = (length / 2.0, width / 2.0, height / 2.0);
        let mut corners = [Point3::origin(); 8];
        for (i, corner) in corners.iter_mut().enumerate() {
            let sx = if i & 1 == 0 { -hx } else { hx };
            let sy = if i & 2 == 0 { -hy } else { hy };
            let sz = if i & 4 == 0 { -hz } else { hz };
            *corner = Point3::new(sx, sy, sz);
        }
        Self::from_corners(name, corners)
    }

    /// Built-in vehicle-sized box used as the default test object.
    pub fn default_vehicle() -> Self {
        Self::centered_box("vehicle", 0.65, 0.30, 0.12).expect("static model is valid")
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.corners.iter().flat_map(|c| c.coords.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidModel(
                "corners contain non-finite coordinates".into(),
            ));
        }
        let computed = max_pairwise_distance(&self.corners);
        if computed <= 0.0 {
            return Err(GeometryError::InvalidModel(
                "corners are degenerate (zero diameter)".into(),
            ));
        }
        if (computed - self.diameter).abs() > 1e-9 {
            return Err(GeometryError::InvalidModel(format!(
                "declared diameter {} does not match computed {}",
                self.diameter, computed
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        let text = std::fs::read_to_string(path).map_err(|source| GeometryError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let model: Self = serde_json::from_str(&text).map_err(|source| GeometryError::Json {
            path: path.display().to_string(),
            source,
        })?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), GeometryError> {
        let text = serde_json::to_string_pretty(self).expect("model serialize");
        std::fs::write(path, text).map_err(|source| GeometryError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

// ── Rotation metrics and Euler angles ───────────────────────────────────────

/// Z-Y-X intrinsic Euler angles in radians, each in [-π, π].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerAngles {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

/// Result of [`euler_decompose`]; `gimbal_lock` flags |pitch| within
/// [`GIMBAL_LOCK_TOL`] of π/2, where the yaw/roll split is conventional
/// (roll is forced to zero).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerDecomposition {
    pub angles: EulerAngles,
    pub gimbal_lock: bool,
}

/// Per-axis absolute orientation differences, each wrapped to [0, π].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleErrors {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub gimbal_lock: bool,
}

/// Rotation matrix for Z-Y-X intrinsic angles: `R = Rz(yaw)·Ry(pitch)·Rx(roll)`.
pub fn euler_compose(angles: &EulerAngles) -> Matrix3<f64> {
    let (sr, cr) = angles.roll.sin_cos();
    let (sp, cp) = angles.pitch.sin_cos();
    let (sy, cy) = angles.yaw.sin_cos();
    Matrix3::new(
        cy * cp,
        cy * sp * sr - sy * cr,
        cy * sp * cr + sy * sr,
        sy * cp,
        sy * sp * sr + cy * cr,
        sy * sp * cr - cy * sr,
        -sp,
        cp * sr,
        cp * cr,
    )
}

/// Decomposes an orthonormal rotation into Z-Y-X intrinsic Euler angles.
pub fn euler_decompose(r: &Matrix3<f64>) -> EulerDecomposition {
    let sp = (-r[(2, 0)]).clamp(-1.0, 1.0);
    let pitch = sp.asin();
    if (pitch.abs() - std::f64::consts::FRAC_PI_2).abs() < GIMBAL_LOCK_TOL {
        // Only yaw ± roll is observable; report it all as yaw.
        let yaw = (-r[(0, 1)]).atan2(r[(1, 1)]);
        return EulerDecomposition {
            angles: EulerAngles {
                roll: 0.0,
                pitch,
                yaw,
            },
            gimbal_lock: true,
        };
    }
    EulerDecomposition {
        angles: EulerAngles {
            roll: r[(2, 1)].atan2(r[(2, 2)]),
            pitch,
            yaw: r[(1, 0)].atan2(r[(0, 0)]),
        },
        gimbal_lock: false,
    }
}

/// Geodesic distance between two rotations, in radians.
///
/// `arccos((tr(r1ᵀ·r2) − 1) / 2)` with the argument clamped to [−1, 1] so
/// floating-point drift on near-identical inputs cannot produce NaN.
pub fn rotation_error(r1: &Matrix3<f64>, r2: &Matrix3<f64>) -> f64 {
    let trace = (r1.transpose() * r2).trace();
    ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Wraps an absolute angular difference into [0, π].
fn wrap_angle_diff(d: f64) -> f64 {
    let d = d.abs() % std::f64::consts::TAU;
    if d > std::f64::consts::PI {
        std::f64::consts::TAU - d
    } else {
        d
    }
}

/// Per-axis absolute differences of the Euler decompositions of two rotations.
pub fn angle_errors(r1: &Matrix3<f64>, r2: &Matrix3<f64>) -> AngleErrors {
    let a = euler_decompose(r1);
    let b = euler_decompose(r2);
    AngleErrors {
        roll: wrap_angle_diff(a.angles.roll - b.angles.roll),
        pitch: wrap_angle_diff(a.angles.pitch - b.angles.pitch),
        yaw: wrap_angle_diff(a.angles.yaw - b.angles.yaw),
        gimbal_lock: a.gimbal_lock || b.gimbal_lock,
    }
}
