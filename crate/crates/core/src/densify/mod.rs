//! Sparse-to-dense depth for the representative frame of a cluster.
//!
//! Every densifier turns an [`AnchorMap`] into a [`DepthMap`] that reproduces
//! the anchors to within `anchor_agreement_tol`, keeps valid depths in
//! `(0, max_depth]`, and marks at least the anchor convex hull valid.

mod external;
mod idw;
mod plane;

use std::path::PathBuf;
use std::time::Duration;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchor::AnchorMap;
use crate::geometry::{CameraIntrinsics, FrameId, Pose};

pub use external::{read_request, serve_request, ExternalDensifier, DONE_FILE, REQUEST_ANCHOR, REQUEST_CAMERA, REQUEST_IMAGE, RESPONSE_DEPTH};
pub use idw::{idw_raster, median_spacing, SiteIndex, IDW_NEIGHBORS, IDW_POWER};
pub use plane::{fit_plane_lmeds, PlaneFitDensifier};

#[derive(Debug, Error)]
pub enum DensifyError {
    #[error("anchor map of frame {0} is empty")]
    EmptyAnchor(FrameId),
    #[error("invalid densifier config: {0}")]
    InvalidConfig(String),
    #[error("external result breaks the contract: max relative deviation {max_rel_dev:.4e} over {violating_cells} anchor cells, {out_of_range} depths outside (0, max_depth]")]
    ContractViolation { max_rel_dev: f64, violating_cells: usize, out_of_range: usize },
    #[error("external densifier did not finish within {0:?}")]
    ExternalTimeout(Duration),
    #[error("external densifier failed: {0}")]
    External(String),
    #[error("depth map {depth:?} does not match anchor map {anchor:?}")]
    DimensionMismatch { depth: (u32, u32, FrameId), anchor: (u32, u32, FrameId) },
    #[error(transparent)]
    Io(#[from] crate::io::IoError),
}

impl From<std::io::Error> for DensifyError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.into())
    }
}

/// Dense metric depth (camera-frame z) for one frame, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub depth: Vec<f64>,
    pub valid_mask: Vec<bool>,
    pub frame_id: FrameId,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    pub producer: String,
}

impl DepthMap {
    pub fn index(&self, u: u32, v: u32) -> usize {
        v as usize * self.width as usize + u as usize
    }

    /// Depth at a pixel if it is valid.
    pub fn get(&self, u: u32, v: u32) -> Option<f64> {
        let i = self.index(u, v);
        self.valid_mask[i].then_some(self.depth[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid_mask.iter().filter(|&&m| m).count()
    }

    /// Row-major values with invalid pixels as `None`, the on-disk layout.
    pub fn values(&self) -> impl Iterator<Item = Option<f64>> + '_ {
        self.depth.iter().zip(&self.valid_mask).map(|(&d, &m)| m.then_some(d))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensifierKind {
    Idw,
    PlaneFit,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifierConfig {
    pub kind: DensifierKind,
    pub anchor_agreement_tol: f64,
    /// Scene ceiling (meters).
    pub max_depth: f64,
    /// Program and arguments; the request directory is appended as the last argument.
    pub external_command: Vec<String>,
    pub external_timeout_s: f64,
    /// Parent of the per-request directories. Defaults to the system temp dir.
    pub external_work_dir: Option<PathBuf>,
    pub plane_iterations: usize,
    pub seed: u64,
}

impl Default for DensifierConfig {
    fn default() -> Self {
        Self {
            kind: DensifierKind::Idw,
            anchor_agreement_tol: 0.01,
            max_depth: 1000.0,
            external_command: Vec::new(),
            external_timeout_s: 60.0,
            external_work_dir: None,
            plane_iterations: 500,
            seed: 0,
        }
    }
}

impl DensifierConfig {
    pub fn validate(&self) -> Result<(), DensifyError> {
        let bad = |m: &str| Err(DensifyError::InvalidConfig(m.to_string()));
        if !(self.anchor_agreement_tol > 0.0 && self.anchor_agreement_tol < 1.0) {
            return bad("anchor_agreement_tol must lie in (0, 1)");
        }
        if !(self.max_depth > 0.0 && self.max_depth.is_finite()) {
            return bad("max_depth must be positive");
        }
        if self.kind == DensifierKind::External {
            if self.external_command.is_empty() {
                return bad("external densifier needs external_command");
            }
            if !(self.external_timeout_s > 0.0 && self.external_timeout_s.is_finite()) {
                return bad("external_timeout_s must be positive");
            }
        }
        if self.plane_iterations == 0 {
            return bad("plane_iterations must be at least 1");
        }
        Ok(())
    }
}

pub trait Densifier: Send + Sync {
    fn id(&self) -> &str;
    fn densify(&self, image: Option<&RgbImage>, anchor: &AnchorMap) -> Result<DepthMap, DensifyError>;
}

pub struct IdwDensifier {
    pub max_depth: f64,
}

impl Densifier for IdwDensifier {
    fn id(&self) -> &str {
        "idw"
    }

    fn densify(&self, _image: Option<&RgbImage>, anchor: &AnchorMap) -> Result<DepthMap, DensifyError> {
        let (index, values) = anchor_sites(anchor)?;
        let (raster, nearest) = idw_raster(&index, &values, anchor.width, anchor.height);
        Ok(finish(anchor, &index, raster, &nearest, self.max_depth, self.id()))
    }
}

/// Builds the densifier selected by `config`.
pub fn make_densifier(config: &DensifierConfig) -> Result<Box<dyn Densifier>, DensifyError> {
    config.validate()?;
    Ok(match config.kind {
        DensifierKind::Idw => Box::new(IdwDensifier { max_depth: config.max_depth }),
        DensifierKind::PlaneFit => {
            Box::new(PlaneFitDensifier { max_depth: config.max_depth, iterations: config.plane_iterations, seed: config.seed })
        }
        DensifierKind::External => Box::new(ExternalDensifier::from_config(config)),
    })
}

pub fn densify(image: Option<&RgbImage>, anchor: &AnchorMap, config: &DensifierConfig) -> Result<DepthMap, DensifyError> {
    make_densifier(config)?.densify(image, anchor)
}

/// Like [`densify`], but a contract violation is answered by re-densifying
/// with idw. The violation is returned next to the replacement map.
pub fn densify_with_fallback(
    image: Option<&RgbImage>,
    anchor: &AnchorMap,
    config: &DensifierConfig,
) -> Result<(DepthMap, Option<DensifyError>), DensifyError> {
    match densify(image, anchor, config) {
        Ok(d) => Ok((d, None)),
        Err(e @ DensifyError::ContractViolation { .. }) => {
            log::warn!("frame {}: {e}; falling back to idw", anchor.frame_id);
            let d = IdwDensifier { max_depth: config.max_depth }.densify(image, anchor)?;
            Ok((d, Some(e)))
        }
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgreementReport {
    pub max_rel_dev: f64,
    /// Anchor cells whose relative deviation exceeds the tolerance, including
    /// cells the depth map leaves invalid.
    pub violating_cells: Vec<(u32, u32)>,
}

pub fn verify_anchor_agreement(depth: &DepthMap, anchor: &AnchorMap, tol: f64) -> Result<AgreementReport, DensifyError> {
    if (depth.width, depth.height, depth.frame_id) != (anchor.width, anchor.height, anchor.frame_id) {
        return Err(DensifyError::DimensionMismatch {
            depth: (depth.width, depth.height, depth.frame_id),
            anchor: (anchor.width, anchor.height, anchor.frame_id),
        });
    }
    let mut report = AgreementReport { max_rel_dev: 0.0, violating_cells: Vec::new() };
    for (&(u, v), cell) in &anchor.cells {
        let dev = match depth.get(u, v) {
            Some(d) if d.is_finite() => (d - cell.depth).abs() / cell.depth,
            _ => f64::INFINITY,
        };
        report.max_rel_dev = report.max_rel_dev.max(dev);
        if dev > tol {
            report.violating_cells.push((u, v));
        }
    }
    Ok(report)
}

/// Anchor pixels as interpolation sites, in map order.
fn anchor_sites(anchor: &AnchorMap) -> Result<(SiteIndex, Vec<f64>), DensifyError> {
    if anchor.is_empty() {
        return Err(DensifyError::EmptyAnchor(anchor.frame_id));
    }
    let sites = anchor.cells.keys().map(|&(u, v)| [u as f64, v as f64]).collect();
    let values = anchor.cells.values().map(|c| c.depth).collect();
    Ok((SiteIndex::new(sites, (anchor.width as f64, anchor.height as f64)), values))
}

/// Applies the validity rule: a pixel is valid inside the anchor hull or
/// within twice the median anchor spacing of its nearest anchor, and only if
/// its depth lies in `(0, max_depth]`.
fn finish(anchor: &AnchorMap, index: &SiteIndex, raster: Vec<f64>, nearest: &[f64], max_depth: f64, producer: &str) -> DepthMap {
    let reach = 2.0 * median_spacing(index);
    let hull = ConvexHull::new(anchor.cells.keys().map(|&(u, v)| [u as i64, v as i64]).collect());
    let w = anchor.width as usize;
    let valid_mask = raster
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let (u, v) = ((i % w) as i64, (i / w) as i64);
            let near = nearest[i] <= reach || hull.contains([u, v]);
            near && z > 0.0 && z <= max_depth && z.is_finite()
        })
        .collect();
    DepthMap {
        width: anchor.width,
        height: anchor.height,
        depth: raster,
        valid_mask,
        frame_id: anchor.frame_id,
        pose: anchor.pose,
        intrinsics: anchor.intrinsics,
        producer: producer.to_string(),
    }
}

/// Convex hull of integer pixel positions with exact containment tests.
#[derive(Debug, Clone)]
pub struct ConvexHull {
    /// Counter-clockwise in (u, v) with collinear points removed.
    vertices: Vec<[i64; 2]>,
}

fn cross(o: [i64; 2], a: [i64; 2], b: [i64; 2]) -> i64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

impl ConvexHull {
    pub fn new(mut pts: Vec<[i64; 2]>) -> Self {
        pts.sort_unstable();
        pts.dedup();
        if pts.len() < 3 {
            return Self { vertices: pts };
        }
        let mut lower: Vec<[i64; 2]> = Vec::new();
        for &p in &pts {
            while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0 {
                lower.pop();
            }
            lower.push(p);
        }
        let mut upper: Vec<[i64; 2]> = Vec::new();
        for &p in pts.iter().rev() {
            while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0 {
                upper.pop();
            }
            upper.push(p);
        }
        lower.pop();
        upper.pop();
        lower.extend(upper);
        Self { vertices: lower }
    }

    pub fn vertices(&self) -> &[[i64; 2]] {
        &self.vertices
    }

    pub fn contains(&self, p: [i64; 2]) -> bool {
        match self.vertices.len() {
            0 => false,
            1 => self.vertices[0] == p,
            2 => {
                // all input points collinear: the hull is a segment
                let (a, b) = (self.vertices[0], self.vertices[1]);
                cross(a, b, p) == 0
                    && p[0] >= a[0].min(b[0])
                    && p[0] <= a[0].max(b[0])
                    && p[1] >= a[1].min(b[1])
                    && p[1] <= a[1].max(b[1])
            }
            n => (0..n).all(|i| cross(self.vertices[i], self.vertices[(i + 1) % n], p) >= 0),
        }
    }
}
