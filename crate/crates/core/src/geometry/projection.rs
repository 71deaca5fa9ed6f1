use nalgebra::{Matrix2x3, Matrix2x6, Vector2, Vector3};

use super::{skew, CameraIntrinsics, GeometryError, Pose};

/// Residual plus analytic Jacobians w.r.t. the pose local update `[δω, δt]`
/// and the world point.
#[derive(Debug, Clone, Copy)]
pub struct ResidualJacobian {
    pub residual: Vector2<f64>,
    pub d_pose: Matrix2x6<f64>,
    pub d_point: Matrix2x3<f64>,
    pub depth: f64,
}

fn pinhole(k: &CameraIntrinsics, pc: &Vector3<f64>) -> Vector2<f64> {
    Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy)
}

/// `π(K·(R·P + t))`. The result may fall outside the image.
pub fn project(
    k: &CameraIntrinsics,
    pose: &Pose,
    point: &Vector3<f64>,
) -> Result<Vector2<f64>, GeometryError> {
    let pc = pose.transform(point);
    if pc.z <= 0.0 {
        return Err(GeometryError::NonPositiveDepth(pc.z));
    }
    Ok(pinhole(k, &pc))
}

/// World point seen at pixel `uv` with camera-frame depth `depth`.
pub fn back_project(k: &CameraIntrinsics, pose: &Pose, uv: &Vector2<f64>, depth: f64) -> Vector3<f64> {
    let pc = Vector3::new((uv.x - k.cx) / k.fx * depth, (uv.y - k.cy) / k.fy * depth, depth);
    pose.rotation.inverse() * (pc - pose.translation)
}

/// `project(K, pose, P) − obs` with Jacobians.
pub fn reprojection_residual(
    obs: &Vector2<f64>,
    k: &CameraIntrinsics,
    pose: &Pose,
    point: &Vector3<f64>,
) -> Result<ResidualJacobian, GeometryError> {
    let rp = pose.rotation * point;
    let pc = rp + pose.translation;
    if pc.z <= 0.0 {
        return Err(GeometryError::NonPositiveDepth(pc.z));
    }
    let iz = 1.0 / pc.z;
    let d_proj = Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * pc.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * pc.y * iz * iz,
    );
    // ∂X_c/∂δω = −[R·P]×, ∂X_c/∂δt = I, ∂X_c/∂P = R
    let d_rot = d_proj * (-skew(&rp));
    let mut d_pose = Matrix2x6::zeros();
    d_pose.fixed_view_mut::<2, 3>(0, 0).copy_from(&d_rot);
    d_pose.fixed_view_mut::<2, 3>(0, 3).copy_from(&d_proj);
    let d_point = d_proj * pose.rotation.matrix();
    Ok(ResidualJacobian { residual: pinhole(k, &pc) - obs, d_pose, d_point, depth: pc.z })
}
