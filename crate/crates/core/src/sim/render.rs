//! Synthetic observations: feature tracks, exact depth and textured images.

use std::collections::{BTreeMap, BTreeSet};

use image::{Rgb, RgbImage};
use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::mission::Mission;
use super::scene::{SyntheticScene, Terrain};
use crate::ba::{Track, TrackId, TrackObservation};
use crate::densify::DepthMap;
use crate::geometry::{project, CameraIntrinsics, FrameId, Pose};

/// Marker tracks use ids from here up, in marker order.
pub const MARKER_TRACK_BASE: TrackId = 1_000_000_000;

/// Ray–terrain intersections stop once the depth bracket is this narrow.
pub const DEPTH_TOL: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct RenderedTracks {
    pub tracks: Vec<Track>,
    /// True 3D position per track id, markers included.
    pub truth: BTreeMap<TrackId, Vector3<f64>>,
    /// Observations replaced by uniform pixels.
    pub outliers: BTreeSet<(TrackId, FrameId)>,
}

impl RenderedTracks {
    pub fn observation_count(&self) -> usize {
        self.tracks.iter().map(|t| t.observations.len()).sum()
    }
}

/// Projects `n_features` scene features (a uniform stride through the
/// lattice) and all markers into every frame that sees them, adds Gaussian
/// pixel noise, then replaces `round(outlier_fraction·N)` of the `N`
/// feature observations with uniform in-bounds pixels. Noisy pixels that
/// leave the image are dropped, as are tracks left with a single view.
pub fn render_tracks(
    scene: &SyntheticScene,
    mission: &Mission,
    n_features: usize,
    pixel_noise_sigma: f64,
    outlier_fraction: f64,
    seed: u64,
) -> RenderedTracks {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let noise = Normal::new(0.0, pixel_noise_sigma.max(0.0)).expect("finite sigma");
    let n = n_features.min(scene.feature_points.len());
    let stride = scene.feature_points.len() as f64 / n.max(1) as f64;
    let features = (0..n).map(|i| (i as TrackId, scene.feature_points[(i as f64 * stride) as usize]));
    let markers = scene.markers.iter().enumerate().map(|(i, m)| (MARKER_TRACK_BASE + i as TrackId, m.position));
    let mut tracks = Vec::new();
    let mut truth = BTreeMap::new();
    for (id, p) in features.chain(markers) {
        let mut obs = Vec::new();
        for f in &mission.frames {
            let pose = &mission.truth[&f.id];
            let Ok(uv) = project(&f.intrinsics, pose, &p) else { continue };
            if !f.intrinsics.contains(uv.x, uv.y) {
                continue;
            }
            let noisy = uv + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            if f.intrinsics.contains(noisy.x, noisy.y) {
                obs.push(TrackObservation { frame_id: f.id, pixel: noisy });
            }
        }
        if obs.len() >= 2 {
            tracks.push(Track::new(id, obs));
            truth.insert(id, p);
        }
    }
    let slots: Vec<(usize, usize)> = tracks
        .iter()
        .enumerate()
        .filter(|(_, t)| t.track_id < MARKER_TRACK_BASE)
        .flat_map(|(i, t)| (0..t.observations.len()).map(move |j| (i, j)))
        .collect();
    let m = (outlier_fraction.clamp(0.0, 1.0) * slots.len() as f64).round() as usize;
    let mut chosen = rand::seq::index::sample(&mut rng, slots.len(), m).into_vec();
    chosen.sort_unstable();
    let mut outliers = BTreeSet::new();
    let intrinsics: BTreeMap<FrameId, CameraIntrinsics> = mission.frames.iter().map(|f| (f.id, f.intrinsics)).collect();
    for c in chosen {
        let (i, j) = slots[c];
        let id = tracks[i].track_id;
        let o = &mut tracks[i].observations[j];
        let k = intrinsics[&o.frame_id];
        o.pixel = Vector2::new(rng.random_range(0.0..k.width as f64), rng.random_range(0.0..k.height as f64));
        outliers.insert((id, o.frame_id));
    }
    RenderedTracks { tracks, truth, outliers }
}

/// Camera-frame depth where the ray through `uv` meets the terrain, by
/// bisection. The caller must keep the camera above the terrain and the
/// ray steeper than the slope bound so the crossing is unique.
pub fn ray_depth(terrain: &Terrain, k: &CameraIntrinsics, pose: &Pose, uv: &Vector2<f64>) -> Option<f64> {
    let c = pose.center();
    // world displacement per unit camera depth
    let dir = pose.rotation.inverse() * Vector3::new((uv.x - k.cx) / k.fx, (uv.y - k.cy) / k.fy, 1.0);
    if !(dir.z < 0.0) {
        return None;
    }
    let (zmin, zmax) = terrain.elevation_bounds();
    let above = |d: f64| {
        let p = c + dir * d;
        p.z - terrain.height(p.x, p.y)
    };
    let mut lo = ((c.z - zmax) / -dir.z).max(0.0);
    let mut hi = (c.z - zmin) / -dir.z;
    if !(above(lo) >= 0.0) || !(above(hi) <= 0.0) {
        return None;
    }
    while hi - lo > DEPTH_TOL {
        let mid = 0.5 * (lo + hi);
        if above(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Exact terrain depth for every pixel of a camera.
pub fn true_depth(scene: &SyntheticScene, frame_id: FrameId, pose: &Pose, k: &CameraIntrinsics) -> DepthMap {
    let n = (k.width * k.height) as usize;
    let mut depth = vec![0.0; n];
    let mut valid_mask = vec![false; n];
    for v in 0..k.height {
        for u in 0..k.width {
            if let Some(d) = ray_depth(&scene.terrain, k, pose, &Vector2::new(u as f64, v as f64)) {
                let i = v as usize * k.width as usize + u as usize;
                depth[i] = d;
                valid_mask[i] = true;
            }
        }
    }
    DepthMap { width: k.width, height: k.height, depth, valid_mask, frame_id, pose: *pose, intrinsics: *k, producer: "truth".into() }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Ground texture: one hashed colour per 1 m cell, darker on every other
/// 2 m elevation band.
pub fn ground_color(seed: u64, p: &Vector3<f64>) -> Rgb<u8> {
    let (i, j) = (p.x.floor() as i64, p.y.floor() as i64);
    let h = splitmix(seed ^ splitmix((i as u64) << 32 ^ (j as u64 & 0xffff_ffff)));
    let dark = (p.z / 2.0).floor() as i64 % 2 != 0;
    let ch = |s: u32| {
        let c = 60 + ((h >> s) & 0xff) as u32 * 160 / 255;
        (if dark { c * 3 / 4 } else { c }) as u8
    };
    Rgb([ch(0), ch(8), ch(16)])
}

/// Image of the textured terrain at `scale` times the camera resolution.
pub fn render_image(scene: &SyntheticScene, pose: &Pose, k: &CameraIntrinsics, scale: f64) -> RgbImage {
    let ks = k.scaled(scale);
    RgbImage::from_fn(ks.width, ks.height, |u, v| {
        match ray_depth(&scene.terrain, &ks, pose, &Vector2::new(u as f64, v as f64)) {
            Some(d) => {
                let pc = Vector3::new((u as f64 - ks.cx) / ks.fx * d, (v as f64 - ks.cy) / ks.fy * d, d);
                ground_color(scene.seed, &(pose.rotation.inverse() * (pc - pose.translation)))
            }
            None => Rgb([0, 0, 0]),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::mission::{generate_mission, nadir_rotation, GnssNoise, MissionPlan};
    use crate::sim::scene::SceneConfig;

    fn scene() -> SyntheticScene {
        SyntheticScene::generate(4, &SceneConfig { feature_spacing: 4.0, ..Default::default() })
    }

    fn flat() -> SyntheticScene {
        let mut s = scene();
        s.terrain = Terrain::flat(0.0);
        s
    }

    #[test]
    fn flat_depth_matches_plane_intersection() {
        let k = CameraIntrinsics { fx: 60.0, fy: 60.0, cx: 31.5, cy: 17.5, width: 64, height: 36 };
        let pose = Pose::from_center(nadir_rotation(1.0), Vector3::new(3.0, 7.0, 50.0));
        let d = true_depth(&flat(), FrameId(0), &pose, &k);
        assert_eq!(d.valid_count(), 64 * 36);
        let half_diag = (32.0f64.powi(2) + 18.0f64.powi(2)).sqrt() / 60.0;
        let sec = (1.0 + half_diag * half_diag).sqrt();
        for &x in &d.depth {
            // nadir camera: every pixel's camera depth is the height above the plane
            assert!((x - 50.0).abs() < 1e-6);
            assert!(x >= 50.0 - 1e-6 && x <= 50.0 * sec);
        }
    }

    #[test]
    fn principal_point_depth() {
        let s = scene();
        let k = MissionPlan::default().intrinsics;
        let c = Vector3::new(2.0, 120.0, 50.0);
        let pose = Pose::from_center(nadir_rotation(-1.0), c);
        let d = ray_depth(&s.terrain, &k, &pose, &Vector2::new(k.cx, k.cy)).unwrap();
        assert!((d - (50.0 - s.terrain.height(c.x, c.y))).abs() < 1e-6);
    }

    #[test]
    fn depth_lands_on_terrain() {
        let s = scene();
        let k = CameraIntrinsics { fx: 60.0, fy: 60.0, cx: 31.5, cy: 17.5, width: 64, height: 36 };
        let pose = Pose::from_center(nadir_rotation(1.0), Vector3::new(0.0, 130.0, 50.0));
        let d = true_depth(&s, FrameId(0), &pose, &k);
        for v in (0..36).step_by(5) {
            for u in (0..64).step_by(7) {
                let p = crate::geometry::back_project(&k, &pose, &Vector2::new(u as f64, v as f64), d.get(u, v).unwrap());
                assert!((p.z - s.terrain.height(p.x, p.y)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn noiseless_tracks_reproject_exactly() {
        let s = scene();
        let plan = MissionPlan::default();
        let m = generate_mission(&s, &plan, &GnssNoise::default());
        let r = render_tracks(&s, &m, 500, 0.0, 0.0, 1);
        assert!(r.tracks.len() > 60, "{}", r.tracks.len());
        assert!(r.outliers.is_empty());
        assert_eq!(r.tracks.iter().filter(|t| t.track_id >= MARKER_TRACK_BASE).count(), 3);
        for t in &r.tracks {
            assert!(t.is_well_formed() && t.observations.len() >= 2);
            for o in &t.observations {
                let uv = project(&plan.intrinsics, &m.truth[&o.frame_id], &r.truth[&t.track_id]).unwrap();
                assert_eq!(uv, o.pixel);
            }
        }
    }

    #[test]
    fn outlier_fraction_and_labels() {
        let s = scene();
        let plan = MissionPlan { frames_per_strip: 6, ..Default::default() };
        let m = generate_mission(&s, &plan, &GnssNoise::default());
        let r = render_tracks(&s, &m, 800, 0.5, 0.3, 9);
        let feature_obs: usize = r.tracks.iter().filter(|t| t.track_id < MARKER_TRACK_BASE).map(|t| t.observations.len()).sum();
        assert_eq!(r.outliers.len(), (0.3 * feature_obs as f64).round() as usize);
        for t in &r.tracks {
            for o in &t.observations {
                let uv = project(&plan.intrinsics, &m.truth[&o.frame_id], &r.truth[&t.track_id]).unwrap();
                let labeled = r.outliers.contains(&(t.track_id, o.frame_id));
                assert!(labeled || (uv - o.pixel).norm() < 5.0 * 0.5 * 2.0);
                assert!(plan.intrinsics.contains(o.pixel.x, o.pixel.y));
            }
        }
        let again = render_tracks(&s, &m, 800, 0.5, 0.3, 9);
        assert_eq!(again.tracks, r.tracks);
    }

    #[test]
    fn image_is_deterministic_and_textured() {
        let s = scene();
        let k = MissionPlan::default().intrinsics;
        let pose = Pose::from_center(nadir_rotation(1.0), Vector3::new(0.0, 100.0, 50.0));
        let a = render_image(&s, &pose, &k, 0.1);
        assert_eq!((a.width(), a.height()), (64, 36));
        assert_eq!(a, render_image(&s, &pose, &k, 0.1));
        let distinct: BTreeSet<_> = a.pixels().map(|p| p.0).collect();
        assert!(distinct.len() > 100);
    }
}
