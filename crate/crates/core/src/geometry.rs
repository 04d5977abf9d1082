//! Pinhole camera model, rigid world→camera poses and pose-error metrics.
//!
//! Poses map world points into the camera frame: `x_cam = R * x_world + t`.
//! Pixel coordinates place the center of the top-left pixel at `(0, 0)`.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

/// Minimum camera-frame depth for a point to count as in front of the camera.
pub const MIN_DEPTH: f64 = 1e-9;

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Zero-skew pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fx.is_finite() && self.fy > 0.0 && self.fy.is_finite()) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive and finite (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point must be finite (cx={}, cy={})",
                self.cx, self.cy
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

/// A 3D point in the world frame, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub position: Vector3<f64>,
}

impl Landmark {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self {
            position: Vector3::new(x, y, z),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
    }
}

impl From<Vector3<f64>> for Landmark {
    fn from(position: Vector3<f64>) -> Self {
        Self { position }
    }
}

/// Continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelPoint {
    pub x: f64,
    pub y: f64,
}

impl PixelPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &PixelPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Rigid world→camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    /// `(w, x, y, z)`, `w ≥ 0`; kept so quaternion input round-trips exactly.
    quat: [f64; 4],
}

fn quat_of(rotation: &Matrix3<f64>) -> [f64; 4] {
    let rot = Rotation3::from_matrix_unchecked(*rotation);
    let q = UnitQuaternion::from_rotation_matrix(&rot);
    let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
    [q.w, q.i, q.j, q.k]
}

impl Pose {
    /// Builds a pose, checking that `rotation` is a proper rotation within 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidPose("non-finite entries".into()));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if ortho > ORTHONORMAL_TOL {
            return Err(Error::InvalidPose(format!(
                "rotation is not orthonormal (max |R^T R - I| = {ortho:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::InvalidPose(format!(
                "rotation determinant is {det}, expected +1"
            )));
        }
        Ok(Self {
            quat: quat_of(&rotation),
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            quat: [1.0, 0.0, 0.0, 0.0],
        }
    }

    /// Builds a pose from a rotation that is known to be proper (e.g. the
    /// output of `Rotation3`), skipping validation.
    pub fn from_rotation(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        let rotation = rotation.into_inner();
        Self {
            quat: quat_of(&rotation),
            rotation,
            translation,
        }
    }

    /// Builds a pose from a (not necessarily normalized) quaternion
    /// `(w, x, y, z)` and a translation.
    pub fn from_quaternion(q: [f64; 4], translation: Vector3<f64>) -> Result<Self> {
        let raw = Quaternion::new(q[0], q[1], q[2], q[3]);
        let norm = raw.norm();
        if !(norm.is_finite() && norm > 1e-12) {
            return Err(Error::InvalidPose(format!("degenerate quaternion {q:?}")));
        }
        // already unit to rounding: keep the caller's bits
        let unit = if (raw.norm_squared() - 1.0).abs() <= 4.0 * f64::EPSILON {
            UnitQuaternion::new_unchecked(raw)
        } else {
            UnitQuaternion::from_quaternion(raw)
        };
        let mut pose = Self::new(unit.to_rotation_matrix().into_inner(), translation)?;
        let u = unit.into_inner();
        pose.quat = if u.w < 0.0 {
            [-u.w, -u.i, -u.j, -u.k]
        } else {
            [u.w, u.i, u.j, u.k]
        };
        Ok(pose)
    }

    /// Quaternion `(w, x, y, z)` with non-negative `w`.
    pub fn quaternion(&self) -> [f64; 4] {
        self.quat
    }

    /// Builds the pose of a camera located at `center` whose optical axis
    /// points towards `target`, with image "down" roughly along `-up`.
    pub fn look_at(center: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let z = (target - center)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidPose("camera center coincides with target".into()))?;
        let x = z
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidPose("viewing direction parallel to up".into()))?;
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * center);
        Self::new(rotation, translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        let [w, x, y, z] = self.quat;
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
            quat: [w, -x, -y, -z],
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        let rotation = self.rotation * other.rotation;
        Self {
            quat: quat_of(&rotation),
            rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        camera_center(self)
    }
}

/// Projects a world point into the image.
pub fn project(pose: &Pose, k: &Intrinsics, p: &Landmark) -> Result<PixelPoint> {
    let xc = pose.transform(&p.position);
    if xc.z <= MIN_DEPTH {
        return Err(Error::PointBehindCamera { z: xc.z });
    }
    Ok(PixelPoint {
        x: k.fx * xc.x / xc.z + k.cx,
        y: k.fy * xc.y / xc.z + k.cy,
    })
}

/// Unit bearing vector (camera frame) through a pixel.
pub fn bearing(k: &Intrinsics, px: &PixelPoint) -> Vector3<f64> {
    Vector3::new((px.x - k.cx) / k.fx, (px.y - k.cy) / k.fy, 1.0).normalize()
}

/// Camera center in world coordinates, `-Rᵀt`.
pub fn camera_center(pose: &Pose) -> Vector3<f64> {
    -(pose.rotation.transpose() * pose.translation)
}

/// Position and rotation error between two poses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseError {
    pub position_m: f64,
    pub rotation_deg: f64,
}

/// Distance between camera centers and the angle of the relative rotation.
///
/// The angle is the arccosine of `(trace(R_est R_gtᵀ) - 1) / 2`, evaluated
/// through `atan2` with the skew-symmetric part supplying the sine so that
/// small angles keep full precision.
pub fn pose_error(est: &Pose, gt: &Pose) -> PoseError {
    let position_m = (camera_center(est) - camera_center(gt)).norm();
    PoseError {
        position_m,
        rotation_deg: rotation_angle(&(est.rotation * gt.rotation.transpose())).to_degrees(),
    }
}

/// Rotation angle in radians, in `[0, π]`.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let cos = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let skew = r - r.transpose();
    let sin = (skew.norm() / (2.0 * std::f64::consts::SQRT_2)).min(1.0);
    sin.atan2(cos)
}

/// Skew-symmetric cross-product matrix.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}
