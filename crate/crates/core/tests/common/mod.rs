//! Three-view synthetic BA windows shared by the integration suites.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use aerocluster::ba::{BaProblem, BaselineLock, Observation, WindowFrame};
use aerocluster::geometry::{project, CameraIntrinsics, FrameId, Pose};
use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
pub use rand::{Rng, SeedableRng};
pub use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn k() -> CameraIntrinsics {
    CameraIntrinsics { fx: 466.8, fy: 466.8, cx: 320.0, cy: 180.0, width: 640, height: 360 }
}

pub fn nadir() -> Rotation3<f64> {
    Rotation3::from_matrix_unchecked(Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)))
}

pub struct Scene {
    pub poses: Vec<Pose>,
    pub points: Vec<Vector3<f64>>,
    /// per point: pixel in each camera
    pub pixels: Vec<Vec<Vector2<f64>>>,
}

/// Three nadir-ish cameras 8 m apart at 50 m over rough ground, the first at
/// the origin with identity rotation so the canonical gauge matches the truth.
pub fn scene(n_points: usize, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = Pose::from_center(nadir(), Vector3::new(0.0, 0.0, 50.0));
    let raw = [
        world,
        Pose::from_center(Rotation3::from_euler_angles(0.01, -0.02, 0.03) * nadir(), Vector3::new(0.5, 8.0, 50.4)),
        Pose::from_center(Rotation3::from_euler_angles(-0.02, 0.01, -0.02) * nadir(), Vector3::new(-0.3, 16.0, 49.7)),
    ];
    // express everything in camera 0's frame
    let to_cam0 = world.inverse();
    let poses: Vec<Pose> = raw.iter().map(|p| p.compose(&to_cam0)).collect();
    let mut points = Vec::new();
    let mut pixels = Vec::new();
    while points.len() < n_points {
        let pw = Vector3::new(rng.random_range(-20.0..20.0), rng.random_range(-4.0..20.0), rng.random_range(-3.0..6.0));
        let p = world.transform(&pw);
        let uv: Vec<_> = poses.iter().filter_map(|c| project(&k(), c, &p).ok()).collect();
        if uv.len() == 3 && uv.iter().all(|u| k().contains(u.x, u.y)) {
            points.push(p);
            pixels.push(uv);
        }
    }
    Scene { poses, points, pixels }
}

pub fn problem_from(scene: &Scene, init_poses: &[Pose], init_points: &[Vector3<f64>], noise: f64, seed: u64) -> BaProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, noise.max(1e-300)).unwrap();
    let mut observations = Vec::new();
    for (j, uvs) in scene.pixels.iter().enumerate() {
        for (i, uv) in uvs.iter().enumerate() {
            let e = if noise > 0.0 { Vector2::new(n.sample(&mut rng), n.sample(&mut rng)) } else { Vector2::zeros() };
            observations.push(Observation { frame_id: FrameId(i as u32), track_id: j as u64, pixel: uv + e });
        }
    }
    let baseline = (scene.poses[1].center() - scene.poses[0].center()).norm();
    BaProblem {
        window_frames: init_poses
            .iter()
            .enumerate()
            .map(|(i, p)| WindowFrame { id: FrameId(i as u32), intrinsics: k(), pose: *p, prior: None })
            .collect(),
        fixed_frame_ids: BTreeSet::from([FrameId(0)]),
        baseline_lock: Some(BaselineLock { frame: FrameId(1), reference: FrameId(0), length: baseline }),
        points: init_points.iter().enumerate().map(|(j, p)| (j as u64, *p)).collect(),
        fixed_points: BTreeMap::new(),
        observations,
        robust_delta: 1.5,
        feature_cap: 4000,
        resolution_scale: 1.0,
        attitude_sigma: 0.01,
    }
}

pub fn perturb(poses: &[Pose], rng: &mut ChaCha8Rng) -> Vec<Pose> {
    poses
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if i == 0 {
                return *p;
            }
            let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
            let r = Rotation3::new(axis * 1f64.to_radians()) * p.rotation;
            let c = p.center() * (1.0 + 0.02 * rng.random_range(-1.0..1.0));
            Pose::from_center(r, c + Vector3::new(0.02, -0.02, 0.01) * p.center().norm())
        })
        .collect()
}

pub fn noisy_points(points: &[Vector3<f64>], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let n = Normal::new(0.0, sigma).unwrap();
    points.iter().map(|p| p + Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng))).collect()
}
