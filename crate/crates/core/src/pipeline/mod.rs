//! Streaming orchestration: clustering, windowed BA, anchoring,
//! densification and fusion, plus the run configuration and manifest.

mod inputs;
mod run;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ba::BaConfig;
use crate::clustering::ClusterPolicy;
use crate::densify::DensifierConfig;
use crate::fusion::FusionError;
use crate::io::{Diagnostic, IoError};

pub use inputs::{validate_inputs, InputStream, FRAMES_FILE, IMAGES_DIR, MARKERS_FILE, MARKER_PAIRS_FILE, TRACKS_FILE};
pub use run::{
    marker_pair_errors, measure_markers, prefilter_tracks, run, solve_clusters, BaStats, ClusterRecord, RunManifest, RunSummary, StageTimings, CLOUD_FILE, DSM_FILE, DSM_HEADER_FILE,
    MANIFEST_FILE, MARKERS_MEASURED_FILE, MARKER_ERRORS_FILE, ORTHO_FILE, REPORT_FILE,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{} input problem(s), first: {}", .0.len(), .0.first().map(|d| d.to_string()).unwrap_or_default())]
    Input(Vec<Diagnostic>),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("no cluster produced a fused depth map")]
    NothingFused,
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.into())
    }
}

impl PipelineError {
    /// 1 for input and processing failures, 2 for configuration errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub voxel_size: f64,
    /// Truncation distance in voxels.
    pub truncation_voxels: f64,
    pub max_weight: f64,
    pub dsm_cell_size: f64,
    /// Depth disagreement (meters) above which a view counts as occluded.
    pub occlusion_tol: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { voxel_size: 0.25, truncation_voxels: 3.0, max_weight: 64.0, dsm_cell_size: 0.25, occlusion_tol: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Directory holding `frames.csv`, `tracks.txt` and optional markers and images.
    pub input: PathBuf,
    pub output: PathBuf,
    /// Densifier pool size; 0 picks the number of CPUs.
    pub workers: usize,
    /// Per-image wall-time target in seconds; exceeding it only warns.
    pub time_budget_per_image: f64,
    /// Epipolar RANSAC runs on every frame pair at most this many stream positions apart.
    pub ransac_pair_span: usize,
    pub metrics_window_k: usize,
    pub clustering: ClusterPolicy,
    pub ba: BaConfig,
    pub densifier: DensifierConfig,
    pub fusion: FusionConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input: PathBuf::from("."),
            output: PathBuf::from("out"),
            workers: 0,
            time_budget_per_image: 2.0,
            ransac_pair_span: 2,
            metrics_window_k: 3,
            clustering: ClusterPolicy::default(),
            ba: BaConfig::default(),
            densifier: DensifierConfig::default(),
            fusion: FusionConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Reads a TOML config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.input, &mut cfg.output] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(d) = cfg.densifier.external_work_dir.as_mut() {
            if d.is_relative() {
                *d = base.join(&*d);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.clustering.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.densifier.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        let ba = &self.ba;
        if !(ba.huber_delta > 0.0) || ba.feature_cap == 0 || !(ba.downsample > 0.0 && ba.downsample <= 1.0) {
            return bad("ba: huber_delta and feature_cap must be positive, downsample in (0, 1]".into());
        }
        if !(ba.ransac_threshold_px > 0.0) || ba.ransac_max_iters == 0 || !(ba.attitude_sigma > 0.0) {
            return bad("ba: ransac_threshold_px, ransac_max_iters and attitude_sigma must be positive".into());
        }
        let f = &self.fusion;
        if !(f.voxel_size > 0.0) || !(f.truncation_voxels >= 2.0) || !(f.max_weight >= 1.0) {
            return bad("fusion: voxel_size > 0, truncation_voxels >= 2 and max_weight >= 1 required".into());
        }
        if !(f.dsm_cell_size > 0.0) || !(f.occlusion_tol > 0.0) {
            return bad("fusion: dsm_cell_size and occlusion_tol must be positive".into());
        }
        if !(self.time_budget_per_image > 0.0) {
            return bad("time_budget_per_image must be positive".into());
        }
        if self.ransac_pair_span == 0 || self.metrics_window_k == 0 {
            return bad("ransac_pair_span and metrics_window_k must be at least 1".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form; any value change alters it.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}
