//! Overlap-aware grouping of the frame stream into clusters, and selection of
//! the three-view adjustment window centred on each cluster's middle frame.
//!
//! With GNSS, frames are appended to a cluster while their footprint overlap
//! with the cluster's first frame stays above the threshold. Without GNSS the
//! stream is cut into sequential triples. Consecutive clusters share their
//! boundary frame, so every frame lands in at least one cluster.

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{footprint, overlap_ratio, Frame, FrameId, GeometryError};

/// Overlaps within this distance of the threshold count as having dropped to it.
const OVERLAP_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClusterError {
    #[error("need at least 3 frames, {0} remaining")]
    InsufficientFrames(usize),
    #[error("frame {0} lacks a GNSS prior but GNSS clustering is required")]
    MissingPrior(FrameId),
    #[error("invalid cluster policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid cluster: {0}")]
    InvalidCluster(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GnssMode {
    /// Dynamic clustering when every candidate frame carries a prior, triples otherwise.
    Auto,
    /// Dynamic clustering only; a missing prior is an error.
    Dynamic,
    /// Always sequential triples.
    Triple,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMode {
    GnssDynamic,
    FixedTriple,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterWarning {
    /// Even the second frame fell below the overlap threshold: coverage gap.
    InsufficientOverlap,
    /// A footprint could not be computed (e.g. a ray above the horizon).
    FootprintFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterPolicy {
    pub overlap_threshold: f64,
    pub max_cluster_size: usize,
    pub gnss_mode: GnssMode,
    /// Elevation of the horizontal plane used for footprints (meters).
    pub ground_elevation: f64,
}

impl Default for ClusterPolicy {
    fn default() -> Self {
        Self { overlap_threshold: 0.10, max_cluster_size: 10, gnss_mode: GnssMode::Auto, ground_elevation: 0.0 }
    }
}

impl ClusterPolicy {
    pub fn gnss_required(&self) -> bool {
        self.gnss_mode == GnssMode::Dynamic
    }

    pub fn validate(&self) -> Result<(), ClusterError> {
        if !(self.overlap_threshold > 0.0 && self.overlap_threshold < 1.0) {
            return Err(ClusterError::InvalidPolicy("overlap_threshold must lie in (0, 1)".into()));
        }
        if self.max_cluster_size < 3 {
            return Err(ClusterError::InvalidPolicy("max_cluster_size must be at least 3".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub frame_ids: Vec<FrameId>,
    pub representative_index: usize,
    pub ba_window: [FrameId; 3],
    pub mode: ClusterMode,
    pub warning: Option<ClusterWarning>,
}

impl Cluster {
    pub fn new(frame_ids: Vec<FrameId>, mode: ClusterMode) -> Result<Self, ClusterError> {
        let l = frame_ids.len();
        if l < 3 {
            return Err(ClusterError::InvalidCluster(format!("length {l} < 3")));
        }
        if mode == ClusterMode::FixedTriple && l != 3 {
            return Err(ClusterError::InvalidCluster("fixed triples hold exactly 3 frames".into()));
        }
        let m = l / 2;
        let ba_window = [frame_ids[m - 1], frame_ids[m], frame_ids[m + 1]];
        Ok(Self { frame_ids, representative_index: m, ba_window, mode, warning: None })
    }

    pub fn len(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_ids.is_empty()
    }

    pub fn representative(&self) -> FrameId {
        self.frame_ids[self.representative_index]
    }
}

/// The three frames centred on `m = ⌊L/2⌋`; the middle one is the representative.
pub fn select_ba_window(cluster: &Cluster) -> (FrameId, FrameId, FrameId) {
    let [a, b, c] = cluster.ba_window;
    (a, b, c)
}

fn fixed_triple(stream: &[Frame], warning: Option<ClusterWarning>) -> (Cluster, usize) {
    let ids = stream[..3].iter().map(|f| f.id).collect();
    let mut cluster = Cluster::new(ids, ClusterMode::FixedTriple).expect("three frames");
    cluster.warning = warning;
    (cluster, 2)
}

/// Forms one cluster starting at `stream[0]`.
///
/// Returns the cluster and the number of frames to advance before forming the
/// next one (`L − 1` for dynamic clusters, 2 for triples), so that the next
/// cluster starts on this cluster's last frame.
pub fn form_cluster(stream: &[Frame], policy: &ClusterPolicy) -> Result<(Cluster, usize), ClusterError> {
    policy.validate()?;
    if stream.len() < 3 {
        return Err(ClusterError::InsufficientFrames(stream.len()));
    }
    let probe_end = stream.len().min(policy.max_cluster_size + 1);
    let missing = stream[..probe_end].iter().find(|f| f.gnss_prior.is_none());
    match (policy.gnss_mode, missing) {
        (GnssMode::Triple, _) => return Ok(fixed_triple(stream, None)),
        (GnssMode::Dynamic, Some(f)) => return Err(ClusterError::MissingPrior(f.id)),
        (GnssMode::Auto, Some(_)) => return Ok(fixed_triple(stream, None)),
        _ => {}
    }

    let fp = |f: &Frame| -> Result<_, GeometryError> { footprint(f, policy.ground_elevation) };
    let first = match fp(&stream[0]) {
        Ok(p) => p,
        Err(e) => {
            warn!("footprint of frame {} failed ({e}); falling back to a triple", stream[0].id);
            return Ok(fixed_triple(stream, Some(ClusterWarning::FootprintFailed)));
        }
    };
    let mut len = 1;
    while len < stream.len() && len < policy.max_cluster_size {
        let overlap = match fp(&stream[len]) {
            Ok(p) => overlap_ratio(&first, &p),
            Err(e) => {
                warn!("footprint of frame {} failed ({e}); falling back to a triple", stream[len].id);
                return Ok(fixed_triple(stream, Some(ClusterWarning::FootprintFailed)));
            }
        };
        if overlap <= policy.overlap_threshold + OVERLAP_EPS {
            break;
        }
        len += 1;
    }
    if len == 1 {
        warn!(
            "frame {} does not overlap frame {} above {:.0}%; coverage gap",
            stream[1].id,
            stream[0].id,
            policy.overlap_threshold * 100.0
        );
        return Ok(fixed_triple(stream, Some(ClusterWarning::InsufficientOverlap)));
    }
    // A three-view window needs three frames; the probe frame completes short clusters.
    let len = len.max(3);
    let ids = stream[..len].iter().map(|f| f.id).collect();
    let cluster = Cluster::new(ids, ClusterMode::GnssDynamic)?;
    Ok((cluster, len - 1))
}

/// Clusters a complete, ordered stream. The final cluster is pulled back onto
/// the last three frames when fewer than three remain, so no frame is skipped.
pub fn cluster_stream(frames: &[Frame], policy: &ClusterPolicy) -> Result<Vec<Cluster>, ClusterError> {
    policy.validate()?;
    let n = frames.len();
    if n < 3 {
        return Err(ClusterError::InsufficientFrames(n));
    }
    let mut clusters = Vec::new();
    let mut start = 0;
    while start + 1 < n {
        if n - start < 3 {
            start = n - 3;
        }
        let (cluster, advance) = form_cluster(&frames[start..], policy)?;
        clusters.push(cluster);
        start += advance;
    }
    Ok(clusters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, GnssPrior, Pose};
    use nalgebra::{Matrix3, Rotation3, Vector3};

    fn k() -> CameraIntrinsics {
        CameraIntrinsics { fx: 500.0, fy: 500.0, cx: 320.0, cy: 200.0, width: 640, height: 400 }
    }

    /// Nadir strip along +y at 50 m whose along-track footprint is 40 m.
    fn strip(n: usize, forward_overlap: f64, with_prior: bool) -> Vec<Frame> {
        let rot = Rotation3::from_matrix_unchecked(Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)));
        let spacing = (1.0 - forward_overlap) * 40.0;
        (0..n)
            .map(|i| {
                let f = Frame::new(FrameId(i as u32), i as f64, k());
                if with_prior {
                    let pose = Pose::from_center(rot, Vector3::new(0.0, i as f64 * spacing, 50.0));
                    f.with_prior(GnssPrior { pose, sigma_position: 0.05 })
                } else {
                    f
                }
            })
            .collect()
    }

    #[test]
    fn window_indices() {
        let ids = |n: u32| (0..n).map(FrameId).collect::<Vec<_>>();
        let c9 = Cluster::new(ids(9), ClusterMode::GnssDynamic).unwrap();
        assert_eq!(c9.representative_index, 4);
        assert_eq!(select_ba_window(&c9), (FrameId(3), FrameId(4), FrameId(5)));
        let c3 = Cluster::new(ids(3), ClusterMode::FixedTriple).unwrap();
        assert_eq!(select_ba_window(&c3), (FrameId(0), FrameId(1), FrameId(2)));
        assert_eq!(c3.representative(), FrameId(1));
        let c4 = Cluster::new(ids(4), ClusterMode::GnssDynamic).unwrap();
        assert_eq!(c4.representative_index, 2);
        assert_eq!(select_ba_window(&c4), (FrameId(1), FrameId(2), FrameId(3)));
    }

    #[test]
    fn ninety_percent_strip_gives_nine() {
        let frames = strip(20, 0.9, true);
        let (c, advance) = form_cluster(&frames, &ClusterPolicy::default()).unwrap();
        assert_eq!(c.len(), 9);
        assert_eq!(c.representative_index, 4);
        assert_eq!(c.mode, ClusterMode::GnssDynamic);
        assert_eq!(advance, 8);
    }

    #[test]
    fn fifty_percent_strip_gives_three() {
        // brute force: frame 2 overlaps frame 0 by 0%, frame 1 by 50%
        let frames = strip(10, 0.5, true);
        let first = footprint(&frames[0], 0.0).unwrap();
        let overlaps: Vec<f64> =
            frames[..4].iter().map(|f| overlap_ratio(&first, &footprint(f, 0.0).unwrap())).collect();
        assert!((overlaps[1] - 0.5).abs() < 1e-9 && overlaps[2] < 1e-9 && overlaps[3] == 0.0);
        let (c, _) = form_cluster(&frames, &ClusterPolicy::default()).unwrap();
        assert_eq!(c.len(), 3);
    }

    #[test]
    fn missing_priors_force_triples() {
        let frames = strip(9, 0.9, false);
        let clusters = cluster_stream(&frames, &ClusterPolicy::default()).unwrap();
        for c in &clusters {
            assert_eq!(c.mode, ClusterMode::FixedTriple);
            assert_eq!(c.len(), 3);
            let i = c.frame_ids[1].0;
            assert_eq!(c.frame_ids, vec![FrameId(i - 1), FrameId(i), FrameId(i + 1)]);
        }
        let required = ClusterPolicy { gnss_mode: GnssMode::Dynamic, ..Default::default() };
        assert_eq!(form_cluster(&frames, &required), Err(ClusterError::MissingPrior(FrameId(0))));
    }

    #[test]
    fn one_missing_prior_demotes_the_cluster() {
        let mut frames = strip(12, 0.9, true);
        frames[4].gnss_prior = None;
        let (c, advance) = form_cluster(&frames, &ClusterPolicy::default()).unwrap();
        assert_eq!(c.mode, ClusterMode::FixedTriple);
        assert_eq!(advance, 2);
    }

    #[test]
    fn coverage_gap_degrades_with_warning() {
        let frames = strip(6, 0.0, true);
        let (c, _) = form_cluster(&frames, &ClusterPolicy::default()).unwrap();
        assert_eq!(c.mode, ClusterMode::FixedTriple);
        assert_eq!(c.warning, Some(ClusterWarning::InsufficientOverlap));
    }

    #[test]
    fn too_few_frames() {
        let frames = strip(2, 0.9, true);
        assert_eq!(form_cluster(&frames, &ClusterPolicy::default()), Err(ClusterError::InsufficientFrames(2)));
    }

    #[test]
    fn stream_is_fully_covered() {
        for (n, ov, prior) in [(22, 0.8, true), (22, 0.9, true), (7, 0.5, false), (8, 0.5, false), (30, 0.85, true)] {
            let frames = strip(n, ov, prior);
            let clusters = cluster_stream(&frames, &ClusterPolicy::default()).unwrap();
            let mut seen = vec![false; n];
            for c in &clusters {
                assert!(c.len() >= 3);
                assert!(c.representative_index >= 1 && c.representative_index + 2 <= c.len());
                for id in &c.frame_ids {
                    seen[id.0 as usize] = true;
                }
            }
            assert!(seen.iter().all(|&s| s), "n={n} ov={ov}");
            // deterministic
            assert_eq!(clusters, cluster_stream(&frames, &ClusterPolicy::default()).unwrap());
        }
    }

    #[test]
    fn dynamic_members_overlap_first_frame() {
        let frames = strip(30, 0.8, true);
        let policy = ClusterPolicy::default();
        for c in cluster_stream(&frames, &policy).unwrap() {
            let first = footprint(&frames[c.frame_ids[0].0 as usize], 0.0).unwrap();
            let l = c.len();
            for id in &c.frame_ids[..l - 1] {
                let o = overlap_ratio(&first, &footprint(&frames[id.0 as usize], 0.0).unwrap());
                assert!(o >= policy.overlap_threshold);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn emitted_clusters_respect_bounds_and_cover_stream(
            n in 3usize..40,
            overlap in 0.3f64..0.97,
            with_prior in proptest::bool::ANY,
            threshold in 0.02f64..0.5,
            max_size in 3usize..14,
        ) {
            let frames = strip(n, overlap, with_prior);
            let policy = ClusterPolicy { overlap_threshold: threshold, max_cluster_size: max_size, ..Default::default() };
            let clusters = cluster_stream(&frames, &policy).unwrap();
            let mut seen = vec![false; n];
            for c in &clusters {
                proptest::prop_assert!(c.len() >= 3 && c.len() <= max_size.max(3));
                proptest::prop_assert!(c.representative_index >= 1 && c.representative_index + 2 <= c.len());
                for id in &c.frame_ids {
                    seen[id.0 as usize] = true;
                }
            }
            proptest::prop_assert!(seen.iter().all(|&s| s));
            proptest::prop_assert_eq!(clusters, cluster_stream(&frames, &policy).unwrap());
        }
    }
}
