use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3, Vector6};

use super::GeometryError;

/// World-to-camera rigid transform: `X_c = rotation · P + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self { rotation: Rotation3::identity(), translation: Vector3::zeros() }
    }

    /// Builds a pose from a raw 3×3 matrix, rejecting anything that is not a
    /// proper rotation to within 1e-9.
    pub fn from_matrix(r: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidRotation(format!(
                "orthonormality error {ortho:.3e}, determinant {det:.12}"
            )));
        }
        Ok(Self { rotation: Rotation3::from_matrix_unchecked(r), translation })
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation: q.to_rotation_matrix(), translation }
    }

    /// Pose whose camera centre sits at `center` in world coordinates.
    pub fn from_center(rotation: Rotation3<f64>, center: Vector3<f64>) -> Self {
        Self { rotation, translation: -(rotation * center) }
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let r_inv = self.rotation.inverse();
        Self { rotation: r_inv, translation: -(r_inv * self.translation) }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Minimal local update `[δω, δt]`: `R ← Exp(δω)·R`, `t ← t + δt`.
    pub fn retract(&self, delta: &Vector6<f64>) -> Self {
        let dw = Vector3::new(delta[0], delta[1], delta[2]);
        let dt = Vector3::new(delta[3], delta[4], delta[5]);
        let rotation = Rotation3::new(dw) * self.rotation;
        Self { rotation: renormalize(&rotation), translation: self.translation + dt }
    }

    /// Optical axis (camera +z) in world coordinates.
    pub fn optical_axis(&self) -> Vector3<f64> {
        self.rotation.inverse() * Vector3::z()
    }

    /// Angle of the relative rotation; stable near zero and π.
    pub fn rotation_distance(&self, other: &Pose) -> f64 {
        let m = (self.rotation * other.rotation.inverse()).into_inner();
        let s = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]).norm() * 0.5;
        let c = (m.trace() - 1.0) * 0.5;
        s.atan2(c)
    }
}

/// Projects a numerically drifting rotation back onto SO(3).
pub(crate) fn renormalize(r: &Rotation3<f64>) -> Rotation3<f64> {
    UnitQuaternion::from_rotation_matrix(r).to_rotation_matrix()
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of the SO(3) left Jacobian, `J_l⁻¹(φ)`.
pub fn left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-8 {
        return Matrix3::identity() - 0.5 * k + (1.0 / 12.0) * k * k;
    }
    let coef = 1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() - 0.5 * k + coef * k * k
}
