//! Three-view robust bundle adjustment.
//!
//! Each cluster's window is seeded (`initialize_window`), then refined by a
//! Huber-robustified Levenberg–Marquardt solver that eliminates points via the
//! Schur complement. Frames shared with the previous window stay fixed, which
//! ties consecutive clusters together.

mod epipolar;
mod huber;
mod problem;
mod schur;
mod solver;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, FrameId, GeometryError, GnssPrior, Pose};

pub use epipolar::{ransac_epipolar_filter, EpipolarModel};
pub use huber::huber_weight;
pub use problem::{apply_feature_cap, filter_tracks, initialize_window};
pub use schur::{schur_solve, NormalEquations};
pub use solver::{solve, Termination};

pub type TrackId = u64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BaError {
    #[error("need at least 8 correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("no RANSAC consensus (best inlier ratio {0:.3})")]
    NoConsensus(f64),
    #[error("no pose seed available for frame {0}")]
    DisconnectedCluster(FrameId),
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error("damping exceeded 1e12 without an accepted step")]
    Diverged,
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}

impl From<GeometryError> for BaError {
    fn from(e: GeometryError) -> Self {
        BaError::DegenerateGeometry(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackObservation {
    pub frame_id: FrameId,
    pub pixel: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub track_id: TrackId,
    pub observations: Vec<TrackObservation>,
    pub inlier: bool,
}

impl Track {
    pub fn new(track_id: TrackId, observations: Vec<TrackObservation>) -> Self {
        Self { track_id, observations, inlier: true }
    }

    pub fn observation_in(&self, frame: FrameId) -> Option<Vector2<f64>> {
        self.observations.iter().find(|o| o.frame_id == frame).map(|o| o.pixel)
    }

    /// Distinct frames, at most one observation each.
    pub fn is_well_formed(&self) -> bool {
        let frames: BTreeSet<_> = self.observations.iter().map(|o| o.frame_id).collect();
        frames.len() == self.observations.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TiePoint {
    pub position: Vector3<f64>,
    pub track_id: TrackId,
    /// 1σ position uncertainty (meters).
    pub uncertainty: f64,
    pub observing_frames: Vec<FrameId>,
}

/// A window camera at BA working resolution.
#[derive(Debug, Clone)]
pub struct WindowFrame {
    pub id: FrameId,
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
    pub prior: Option<GnssPrior>,
}

/// Keeps `frame`'s camera centre at distance `length` from the (fixed)
/// `reference` camera, removing the scale degree of freedom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineLock {
    pub frame: FrameId,
    pub reference: FrameId,
    pub length: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub frame_id: FrameId,
    pub track_id: TrackId,
    /// Pixel at working resolution.
    pub pixel: Vector2<f64>,
}

#[derive(Debug, Clone)]
pub struct BaProblem {
    pub window_frames: Vec<WindowFrame>,
    pub fixed_frame_ids: BTreeSet<FrameId>,
    pub baseline_lock: Option<BaselineLock>,
    /// Free points to optimize.
    pub points: BTreeMap<TrackId, Vector3<f64>>,
    /// Points carried over from the previous window, held constant.
    pub fixed_points: BTreeMap<TrackId, TiePoint>,
    pub observations: Vec<Observation>,
    pub robust_delta: f64,
    pub feature_cap: usize,
    /// Working resolution relative to the input images (0.5 = half size).
    pub resolution_scale: f64,
    /// 1σ of GNSS/INS attitude priors (radians).
    pub attitude_sigma: f64,
}

impl BaProblem {
    pub fn validate(&self) -> Result<(), BaError> {
        let bad = |m: String| Err(BaError::InvalidProblem(m));
        let ids: BTreeSet<_> = self.window_frames.iter().map(|f| f.id).collect();
        if ids.len() != self.window_frames.len() {
            return bad("duplicate window frame".into());
        }
        if !self.fixed_frame_ids.is_subset(&ids) {
            return bad("fixed frame outside the window".into());
        }
        if self.fixed_frame_ids.is_empty() && self.window_frames.iter().all(|f| f.prior.is_none()) {
            return bad("gauge not fixed: no fixed frame and no GNSS prior".into());
        }
        if let Some(lock) = &self.baseline_lock {
            if !self.fixed_frame_ids.contains(&lock.reference) || self.fixed_frame_ids.contains(&lock.frame) {
                return bad("baseline lock must tie a free frame to a fixed one".into());
            }
            if !(lock.length > 0.0) {
                return bad("baseline length must be positive".into());
            }
        }
        if !(self.robust_delta > 0.0) || !(self.resolution_scale > 0.0) {
            return bad("robust_delta and resolution_scale must be positive".into());
        }
        for o in &self.observations {
            if !ids.contains(&o.frame_id) {
                return bad(format!("observation references unknown frame {}", o.frame_id));
            }
            if !self.points.contains_key(&o.track_id) && !self.fixed_points.contains_key(&o.track_id) {
                return bad(format!("observation references unknown point {}", o.track_id));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BaSolution {
    pub poses: BTreeMap<FrameId, Pose>,
    pub points: BTreeMap<TrackId, TiePoint>,
    pub fixed_frame_ids: BTreeSet<FrameId>,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// Retained tie points.
    pub inlier_count: usize,
    pub pruned_count: usize,
    /// RMS reprojection error over retained observations, full-resolution pixels.
    pub rms_reprojection: f64,
    pub termination: Termination,
    /// Energy after each accepted step, starting with the initial energy.
    /// A pruning pass restarts the sequence on the reduced problem.
    pub cost_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub gradient_tol: f64,
    pub param_tol: f64,
    /// Initial damping as a multiple of the mean diagonal of `H`.
    pub initial_lambda: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { max_iters: 50, gradient_tol: 1e-8, param_tol: 1e-10, initial_lambda: 1e-4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaConfig {
    pub huber_delta: f64,
    pub feature_cap: usize,
    pub fixed_frames_m: usize,
    /// Overrides the per-frame GNSS position σ when set (meters).
    pub gnss_prior_sigma_xyz: Option<f64>,
    pub attitude_sigma: f64,
    pub downsample: f64,
    pub ransac_threshold_px: f64,
    pub ransac_max_iters: usize,
    pub seed: u64,
    pub solver: SolverConfig,
}

impl Default for BaConfig {
    fn default() -> Self {
        Self {
            huber_delta: 1.5,
            feature_cap: 4000,
            fixed_frames_m: 1,
            gnss_prior_sigma_xyz: None,
            attitude_sigma: 0.002,
            downsample: 0.5,
            ransac_threshold_px: 1.5,
            ransac_max_iters: 2000,
            seed: 0,
            solver: SolverConfig::default(),
        }
    }
}

/// One-line per-cluster diagnostic record.
pub struct BaDiagnostics<'a> {
    pub cluster: usize,
    pub solution: &'a BaSolution,
}

impl fmt::Display for BaDiagnostics<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.solution;
        write!(
            f,
            "cluster={} iterations={} initial_cost={:.6e} final_cost={:.6e} inliers={} pruned={} rms_px={:.4} termination={:?}",
            self.cluster, s.iterations, s.initial_cost, s.final_cost, s.inlier_count, s.pruned_count, s.rms_reprojection, s.termination
        )
    }
}
