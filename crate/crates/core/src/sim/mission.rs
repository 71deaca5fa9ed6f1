//! Nadir survey trajectories with noisy GNSS priors.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scene::SyntheticScene;
use crate::geometry::{CameraIntrinsics, Frame, FrameId, GnssPrior, Pose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MissionPlan {
    /// Flying height above `ground_elevation` (meters).
    pub altitude: f64,
    pub forward_overlap: f64,
    pub side_overlap: f64,
    pub strips: usize,
    pub frames_per_strip: usize,
    /// m/s; only sets timestamps.
    pub speed: f64,
    pub intrinsics: CameraIntrinsics,
    /// Reference plane for overlap geometry.
    pub ground_elevation: f64,
    /// XY of the first exposure.
    pub start: [f64; 2],
}

impl Default for MissionPlan {
    fn default() -> Self {
        Self {
            altitude: 50.0,
            forward_overlap: 0.8,
            side_overlap: 0.3,
            strips: 1,
            frames_per_strip: 22,
            speed: 20.0,
            intrinsics: CameraIntrinsics { fx: 466.8, fy: 466.8, cx: 319.5, cy: 179.5, width: 640, height: 360 },
            ground_elevation: 0.0,
            start: [0.0, 0.0],
        }
    }
}

impl MissionPlan {
    pub fn validate(&self) -> Result<(), String> {
        for (name, o) in [("forward_overlap", self.forward_overlap), ("side_overlap", self.side_overlap)] {
            if !(o > 0.0 && o < 1.0) {
                return Err(format!("{name} must lie in (0, 1)"));
            }
        }
        if !(self.altitude > 0.0) || !(self.speed > 0.0) || self.strips == 0 || self.frames_per_strip == 0 {
            return Err("altitude, speed, strips and frames_per_strip must be positive".into());
        }
        self.intrinsics.validate().map_err(|e| e.to_string())
    }

    /// Along-track footprint length on the reference plane. The image `u`
    /// axis points along track.
    pub fn footprint_along(&self) -> f64 {
        self.intrinsics.width as f64 / self.intrinsics.fx * self.altitude
    }

    pub fn footprint_across(&self) -> f64 {
        self.intrinsics.height as f64 / self.intrinsics.fy * self.altitude
    }

    pub fn frame_spacing(&self) -> f64 {
        (1.0 - self.forward_overlap) * self.footprint_along()
    }

    pub fn strip_spacing(&self) -> f64 {
        (1.0 - self.side_overlap) * self.footprint_across()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GnssNoise {
    /// Per-axis 1σ of the camera centre (meters).
    pub sigma_position: f64,
    /// Per-axis 1σ of the attitude (radians).
    pub sigma_attitude: f64,
    /// Probability that a frame carries no prior.
    pub dropout: f64,
}

impl Default for GnssNoise {
    fn default() -> Self {
        Self { sigma_position: 0.05, sigma_attitude: 0.001, dropout: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct Mission {
    pub frames: Vec<Frame>,
    pub truth: BTreeMap<FrameId, Pose>,
}

/// Nadir camera whose image `u` axis points along `heading` (±1 along world y).
pub fn nadir_rotation(heading: f64) -> Rotation3<f64> {
    let s = heading.signum();
    // rows are the camera axes in world coordinates
    Rotation3::from_matrix_unchecked(Matrix3::new(0.0, s, 0.0, s, 0.0, 0.0, 0.0, 0.0, -1.0))
}

/// Serpentine strips along world y. Consecutive exposures are spaced so
/// flat-ground footprints overlap by exactly `forward_overlap`.
pub fn generate_mission(scene: &SyntheticScene, plan: &MissionPlan, gnss: &GnssNoise) -> Mission {
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    rng.set_stream(1);
    let pos_noise = Normal::new(0.0, gnss.sigma_position.max(0.0)).expect("finite sigma");
    let att_noise = Normal::new(0.0, gnss.sigma_attitude.max(0.0)).expect("finite sigma");
    let z = plan.ground_elevation + plan.altitude;
    let (ds, dx) = (plan.frame_spacing(), plan.strip_spacing());
    let strip_len = ds * (plan.frames_per_strip - 1) as f64;
    let mut frames = Vec::new();
    let mut truth = BTreeMap::new();
    let mut travelled = 0.0;
    for s in 0..plan.strips {
        let heading = if s % 2 == 0 { 1.0 } else { -1.0 };
        let rotation = nadir_rotation(heading);
        let x = plan.start[0] + s as f64 * dx;
        if s > 0 {
            travelled += dx;
        }
        for i in 0..plan.frames_per_strip {
            let along = i as f64 * ds;
            let y = if heading > 0.0 { plan.start[1] + along } else { plan.start[1] + strip_len - along };
            if i > 0 {
                travelled += ds;
            }
            let pose = Pose::from_center(rotation, Vector3::new(x, y, z));
            let id = FrameId(frames.len() as u32);
            let mut frame = Frame::new(id, travelled / plan.speed, plan.intrinsics);
            let c_noise = Vector3::new(pos_noise.sample(&mut rng), pos_noise.sample(&mut rng), pos_noise.sample(&mut rng));
            let r_noise = Vector3::new(att_noise.sample(&mut rng), att_noise.sample(&mut rng), att_noise.sample(&mut rng));
            let drop = rng.random_bool(gnss.dropout.clamp(0.0, 1.0));
            if !drop {
                let r = Rotation3::new(r_noise) * rotation;
                frame = frame.with_prior(GnssPrior { pose: Pose::from_center(r, pose.center() + c_noise), sigma_position: gnss.sigma_position });
            }
            truth.insert(id, pose);
            frames.push(frame);
        }
    }
    Mission { frames, truth }
}
