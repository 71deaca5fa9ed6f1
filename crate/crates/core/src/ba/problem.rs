use std::collections::{BTreeMap, BTreeSet};

use log::{debug, warn};
use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use super::{
    ransac_epipolar_filter, BaConfig, BaError, BaProblem, BaSolution, BaselineLock, Observation, Track, TrackId,
    WindowFrame,
};
use crate::geometry::{triangulate_views, CameraIntrinsics, Frame, FrameId, GnssPrior, Pose};

/// Keeps the `cap` tracks with the most observations inside `window`, ties
/// broken by lowest track id. Returned in track-id order.
pub fn apply_feature_cap<'a>(tracks: Vec<&'a Track>, window: &[FrameId], cap: usize) -> Vec<&'a Track> {
    let count = |t: &Track| t.observations.iter().filter(|o| window.contains(&o.frame_id)).count();
    let mut ranked: Vec<(usize, &Track)> = tracks.into_iter().map(|t| (count(t), t)).collect();
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.track_id.cmp(&b.1.track_id)));
    ranked.truncate(cap);
    let mut kept: Vec<&Track> = ranked.into_iter().map(|(_, t)| t).collect();
    kept.sort_by_key(|t| t.track_id);
    kept
}

fn pair_seed(seed: u64, a: FrameId, b: FrameId) -> u64 {
    seed ^ ((a.0 as u64) << 32 | b.0 as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs the epipolar RANSAC on every frame pair and clears `inlier` on tracks
/// rejected by any pair. A pair with too few correspondences or no consensus
/// rejects every track it shares. Returns the number of newly rejected tracks.
pub fn filter_tracks(
    tracks: &mut [Track],
    pairs: &[(FrameId, FrameId)],
    intrinsics: &BTreeMap<FrameId, CameraIntrinsics>,
    threshold_px: f64,
    max_iters: usize,
    seed: u64,
) -> usize {
    // pairs are independent and seeded individually, so the result does not
    // depend on scheduling
    let per_pair: Vec<Vec<usize>> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let (Some(ka), Some(kb)) = (intrinsics.get(&a), intrinsics.get(&b)) else { return Vec::new() };
            let mut idx = Vec::new();
            let mut corr = Vec::new();
            for (i, t) in tracks.iter().enumerate() {
                if let (Some(ua), Some(ub)) = (t.observation_in(a), t.observation_in(b)) {
                    idx.push(i);
                    corr.push((ua, ub));
                }
            }
            match ransac_epipolar_filter(&corr, ka, kb, threshold_px, max_iters, pair_seed(seed, a, b)) {
                Ok(model) => idx.iter().zip(&model.inliers).filter(|(_, &keep)| !keep).map(|(i, _)| *i).collect(),
                // an unverifiable pair vouches for none of its correspondences
                Err(e) => {
                    warn!("pair ({a}, {b}) has no epipolar consensus ({e}); rejecting its {} shared tracks", idx.len());
                    idx
                }
            }
        })
        .collect();
    let rejected: BTreeSet<usize> = per_pair.into_iter().flatten().collect();
    let mut newly = 0;
    for i in rejected {
        if tracks[i].inlier {
            tracks[i].inlier = false;
            newly += 1;
        }
    }
    newly
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

struct Seeder<'a> {
    window: &'a [&'a Frame],
    tracks: &'a [&'a Track],
    config: &'a BaConfig,
    poses: BTreeMap<FrameId, Pose>,
    known: BTreeMap<TrackId, Vector3<f64>>,
}

impl Seeder<'_> {
    fn intrinsics(&self, id: FrameId) -> CameraIntrinsics {
        self.window.iter().find(|f| f.id == id).expect("window frame").intrinsics
    }

    /// Triangulates every track seen by at least two seeded frames.
    fn refresh_known(&mut self, fixed_points: &BTreeSet<TrackId>) {
        for t in self.tracks {
            if fixed_points.contains(&t.track_id) {
                continue;
            }
            let views: Vec<_> = t
                .observations
                .iter()
                .filter_map(|o| self.poses.get(&o.frame_id).map(|p| (*p, self.intrinsics(o.frame_id), o.pixel)))
                .collect();
            if views.len() >= 2 {
                if let Ok(p) = triangulate_views(&views) {
                    self.known.insert(t.track_id, p);
                }
            }
        }
    }

    /// Relative pose from `from` (seeded) to `to`, with unit baseline.
    fn relative(&self, from: FrameId, to: FrameId) -> Result<(super::EpipolarModel, Vec<(TrackId, Vector2<f64>, Vector2<f64>)>), BaError> {
        let mut corr = Vec::new();
        for t in self.tracks {
            if let (Some(a), Some(b)) = (t.observation_in(from), t.observation_in(to)) {
                corr.push((t.track_id, a, b));
            }
        }
        let pairs: Vec<_> = corr.iter().map(|(_, a, b)| (*a, *b)).collect();
        let model = ransac_epipolar_filter(
            &pairs,
            &self.intrinsics(from),
            &self.intrinsics(to),
            self.config.ransac_threshold_px,
            self.config.ransac_max_iters,
            pair_seed(self.config.seed, from, to),
        )?;
        let inliers = corr.into_iter().zip(&model.inliers).filter(|(_, &m)| m).map(|(c, _)| c).collect();
        Ok((model, inliers))
    }

    /// Baseline that makes unit-baseline triangulations agree with known points.
    fn baseline_from_known(
        &self,
        from: FrameId,
        to: FrameId,
        unit_pose: &Pose,
        corr: &[(TrackId, Vector2<f64>, Vector2<f64>)],
    ) -> Option<f64> {
        let pa = self.poses[&from];
        let ca = pa.center();
        let (ka, kb) = (self.intrinsics(from), self.intrinsics(to));
        let ratios: Vec<f64> = corr
            .iter()
            .filter_map(|(id, a, b)| {
                let x = self.known.get(id)?;
                let x1 = triangulate_views(&[(pa, ka, *a), (*unit_pose, kb, *b)]).ok()?;
                let d1 = (x1 - ca).norm();
                (d1 > 0.0).then(|| (x - ca).norm() / d1)
            })
            .collect();
        median(ratios)
    }
}

/// Builds the BA problem for a three-frame window: seeds poses and points,
/// selects fixed frames, and scales everything to the working resolution.
pub fn initialize_window(
    window: &[&Frame],
    tracks: &[Track],
    previous: Option<&BaSolution>,
    config: &BaConfig,
) -> Result<BaProblem, BaError> {
    if window.len() != 3 {
        return Err(BaError::InvalidProblem(format!("window has {} frames, need 3", window.len())));
    }
    let ids: Vec<FrameId> = window.iter().map(|f| f.id).collect();
    let candidates: Vec<&Track> = tracks
        .iter()
        .filter(|t| t.inlier && t.is_well_formed())
        .filter(|t| t.observations.iter().filter(|o| ids.contains(&o.frame_id)).count() >= 2)
        .collect();
    let kept = apply_feature_cap(candidates, &ids, config.feature_cap);
    let has_priors = window.iter().any(|f| f.gnss_prior.is_some());

    let mut seeder = Seeder { window, tracks: &kept, config, poses: BTreeMap::new(), known: BTreeMap::new() };
    let mut fixed = BTreeSet::new();
    let mut fixed_points = BTreeMap::new();
    if let Some(prev) = previous {
        for id in &ids {
            if let Some(p) = prev.poses.get(id) {
                seeder.poses.insert(*id, *p);
                if fixed.len() < config.fixed_frames_m {
                    fixed.insert(*id);
                }
            }
        }
        // without GNSS, shared tie points carry the scale across windows
        if !has_priors {
            for t in &kept {
                if let Some(tp) = prev.points.get(&t.track_id) {
                    fixed_points.insert(t.track_id, tp.clone());
                    seeder.known.insert(t.track_id, tp.position);
                }
            }
        }
    }
    for f in window {
        if let (false, Some(prior)) = (seeder.poses.contains_key(&f.id), &f.gnss_prior) {
            seeder.poses.insert(f.id, prior.pose);
        }
    }
    if seeder.poses.is_empty() {
        if previous.is_some() {
            return Err(BaError::DisconnectedCluster(ids[0]));
        }
        seeder.poses.insert(ids[0], Pose::identity());
        fixed.insert(ids[0]);
    }

    let fixed_ids: BTreeSet<TrackId> = fixed_points.keys().copied().collect();
    let mut lock = None;
    while seeder.poses.len() < 3 {
        seeder.refresh_known(&fixed_ids);
        // nearest unseeded frame to a seeded one, in window order
        let (from, to) = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .filter(|&(i, j)| seeder.poses.contains_key(&ids[i]) && !seeder.poses.contains_key(&ids[j]))
            .min_by_key(|&(i, j)| (i.abs_diff(j), j, i))
            .map(|(i, j)| (ids[i], ids[j]))
            .expect("some frame is unseeded");
        let (model, corr) = seeder.relative(from, to).map_err(|e| {
            warn!("relative pose {from} -> {to} failed: {e}");
            BaError::DisconnectedCluster(to)
        })?;
        let unit = model.chain(&seeder.poses[&from], 1.0);
        let baseline = match seeder.baseline_from_known(from, to, &unit, &corr) {
            Some(b) => b,
            None if seeder.poses.len() == 1 && fixed.contains(&from) => {
                let length = previous.map(mean_baseline).unwrap_or(1.0);
                if previous.is_some() {
                    warn!("no shared tie points to transfer scale into frame {to}; freezing baseline {length:.3}");
                }
                lock = Some(BaselineLock { frame: to, reference: from, length });
                length
            }
            None => return Err(BaError::DisconnectedCluster(to)),
        };
        seeder.poses.insert(to, model.chain(&seeder.poses[&from], baseline));
    }
    seeder.refresh_known(&fixed_ids);

    let s = config.downsample;
    let mut points = BTreeMap::new();
    let mut observations = Vec::new();
    for t in &kept {
        let is_fixed = fixed_points.contains_key(&t.track_id);
        if !is_fixed {
            match seeder.known.get(&t.track_id) {
                Some(p) => {
                    points.insert(t.track_id, *p);
                }
                None => continue,
            }
        }
        for o in t.observations.iter().filter(|o| ids.contains(&o.frame_id)) {
            observations.push(Observation { frame_id: o.frame_id, track_id: t.track_id, pixel: o.pixel * s });
        }
    }
    debug!("window {:?}: {} points, {} fixed points, {} observations", ids, points.len(), fixed_points.len(), observations.len());
    let window_frames = window
        .iter()
        .map(|f| WindowFrame {
            id: f.id,
            intrinsics: f.intrinsics.scaled(s),
            pose: seeder.poses[&f.id],
            prior: f.gnss_prior.map(|p| GnssPrior {
                sigma_position: config.gnss_prior_sigma_xyz.unwrap_or(p.sigma_position),
                ..p
            }),
        })
        .collect();
    let problem = BaProblem {
        window_frames,
        fixed_frame_ids: fixed,
        baseline_lock: lock,
        points,
        fixed_points,
        observations,
        robust_delta: config.huber_delta,
        feature_cap: config.feature_cap,
        resolution_scale: s,
        attitude_sigma: config.attitude_sigma,
    };
    problem.validate()?;
    Ok(problem)
}

fn mean_baseline(sol: &BaSolution) -> f64 {
    let centers: Vec<_> = sol.poses.values().map(|p| p.center()).collect();
    let d: Vec<f64> = centers.windows(2).map(|w| (w[1] - w[0]).norm()).collect();
    if d.is_empty() {
        1.0
    } else {
        d.iter().sum::<f64>() / d.len() as f64
    }
}
