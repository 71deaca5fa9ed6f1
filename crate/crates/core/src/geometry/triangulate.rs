use std::collections::BTreeMap;

use nalgebra::{DMatrix, Vector2, Vector3};

use super::{CameraIntrinsics, FrameId, GeometryError, Pose};

/// Rays closer to parallel than this (radians) cannot be triangulated.
pub const RAY_ANGLE_TOL: f64 = 1e-6;

/// Linear (DLT) triangulation of one track from its observations.
pub fn triangulate(
    observations: &[(FrameId, Vector2<f64>)],
    poses: &BTreeMap<FrameId, Pose>,
    intrinsics: &BTreeMap<FrameId, CameraIntrinsics>,
) -> Result<Vector3<f64>, GeometryError> {
    let mut views = Vec::with_capacity(observations.len());
    for (fid, uv) in observations {
        if let (Some(p), Some(k)) = (poses.get(fid), intrinsics.get(fid)) {
            views.push((*p, *k, *uv));
        }
    }
    triangulate_views(&views)
}

fn ray(pose: &Pose, k: &CameraIntrinsics, uv: &Vector2<f64>) -> Vector3<f64> {
    let d = Vector3::new((uv.x - k.cx) / k.fx, (uv.y - k.cy) / k.fy, 1.0);
    (pose.rotation.inverse() * d).normalize()
}

/// Largest angle (radians) between any two viewing rays.
pub fn max_ray_angle(views: &[(Pose, CameraIntrinsics, Vector2<f64>)]) -> f64 {
    let rays: Vec<_> = views.iter().map(|(p, k, uv)| ray(p, k, uv)).collect();
    let mut best: f64 = 0.0;
    for i in 0..rays.len() {
        for j in i + 1..rays.len() {
            // atan2 keeps precision for nearly parallel rays
            let a = rays[i].cross(&rays[j]).norm().atan2(rays[i].dot(&rays[j]));
            best = best.max(a);
        }
    }
    best
}

pub fn triangulate_views(
    views: &[(Pose, CameraIntrinsics, Vector2<f64>)],
) -> Result<Vector3<f64>, GeometryError> {
    if views.len() < 2 {
        return Err(GeometryError::DegenerateGeometry(format!(
            "{} usable observation(s), need 2",
            views.len()
        )));
    }
    if max_ray_angle(views) < RAY_ANGLE_TOL {
        return Err(GeometryError::DegenerateGeometry("viewing rays are parallel".into()));
    }
    // Rows in normalized image coordinates: x̂·P₃ − P₁, ŷ·P₃ − P₂ with P = [R|t],
    // expressed relative to the mean camera centre for conditioning.
    let origin = views.iter().fold(Vector3::zeros(), |acc, (p, _, _)| acc + p.center())
        / views.len() as f64;
    let rows = (2 * views.len()).max(4);
    let mut a = DMatrix::<f64>::zeros(rows, 4);
    for (i, (pose, k, uv)) in views.iter().enumerate() {
        let xn = (uv.x - k.cx) / k.fx;
        let yn = (uv.y - k.cy) / k.fy;
        let r = pose.rotation.matrix();
        let t = pose.translation + pose.rotation * origin;
        for c in 0..3 {
            a[(2 * i, c)] = xn * r[(2, c)] - r[(0, c)];
            a[(2 * i + 1, c)] = yn * r[(2, c)] - r[(1, c)];
        }
        a[(2 * i, 3)] = xn * t.z - t.x;
        a[(2 * i + 1, 3)] = yn * t.z - t.y;
    }
    // equilibrate rows so that no single camera dominates
    for r in 0..2 * views.len() {
        let n = a.row(r).norm();
        if n > 0.0 {
            a.row_mut(r).scale_mut(1.0 / n);
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| GeometryError::DegenerateGeometry("SVD failed".into()))?;
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    let h = v_t.row(imin);
    if h[3].abs() < 1e-300 {
        return Err(GeometryError::DegenerateGeometry("point at infinity".into()));
    }
    let p = Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]) + origin;
    for (pose, _, _) in views {
        if pose.transform(&p).z <= 0.0 {
            return Err(GeometryError::DegenerateGeometry(
                "triangulated point lies behind a contributing camera".into(),
            ));
        }
    }
    Ok(p)
}
