//! Pinhole camera geometry: intrinsics, world-to-camera poses, projection with
//! analytic Jacobians, linear triangulation, and ground footprints.
//!
//! Convention: a pose maps world points into the camera frame, `X_c = R·P + t`.
//! The camera looks down its +z axis; image `u` grows with camera +x and `v`
//! with camera +y.

mod footprint;
mod pose;
mod projection;
mod triangulate;

use std::fmt;
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use footprint::{footprint, footprint_at_pose, overlap_ratio, GroundPolygon};
pub use pose::{left_jacobian_inv, skew, Pose};
pub use projection::{back_project, project, reprojection_residual, ResidualJacobian};
pub use triangulate::{max_ray_angle, triangulate, triangulate_views, RAY_ANGLE_TOL};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("point has non-positive camera depth {0}")]
    NonPositiveDepth(f64),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("frame {0} has no GNSS prior")]
    MissingPrior(FrameId),
    #[error("image corner ray does not reach the ground plane")]
    HorizonRay,
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid polygon: {0}")]
    InvalidPolygon(String),
    #[error("invalid rotation: {0}")]
    InvalidRotation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FrameId(pub u32);

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Pinhole intrinsics in pixels. No lens distortion; imagery is assumed rectified.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: &str| Err(GeometryError::InvalidIntrinsics(m.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return bad("focal lengths must be positive and finite");
        }
        if self.width < 2 || self.height < 2 {
            return bad("image must be at least 2x2 pixels");
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad("cx outside [0, width)");
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad("cy outside [0, height)");
        }
        Ok(())
    }

    /// Intrinsics for an image resampled by `factor` (0.5 halves resolution).
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            fx: self.fx * factor,
            fy: self.fy * factor,
            cx: self.cx * factor,
            cy: self.cy * factor,
            width: ((self.width as f64 * factor).round() as u32).max(2),
            height: ((self.height as f64 * factor).round() as u32).max(2),
        }
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }
}

/// Position/attitude prior from GNSS/INS.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GnssPrior {
    pub pose: Pose,
    /// Isotropic 1σ of the camera centre (meters).
    pub sigma_position: f64,
}

#[derive(Debug, Clone)]
pub struct Frame {
    pub id: FrameId,
    pub timestamp: f64,
    pub intrinsics: CameraIntrinsics,
    pub gnss_prior: Option<GnssPrior>,
    pub image: Option<Arc<RgbImage>>,
}

impl Frame {
    pub fn new(id: FrameId, timestamp: f64, intrinsics: CameraIntrinsics) -> Self {
        Self { id, timestamp, intrinsics, gnss_prior: None, image: None }
    }

    pub fn with_prior(mut self, prior: GnssPrior) -> Self {
        self.gnss_prior = Some(prior);
        self
    }
}
