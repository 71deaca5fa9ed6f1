//! Synthetic missions with exact ground truth.
//!
//! All randomness comes from ChaCha8 seeded with a `u64`; scene, trajectory
//! and tracks draw from separate streams of the same seed.

mod mission;
mod render;
mod scene;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::geometry::{FrameId, Pose};
use crate::io::{self, IoError, MarkerPairRecord, MarkerRecord};
use crate::pipeline::{PipelineConfig, FRAMES_FILE, IMAGES_DIR, MARKERS_FILE, MARKER_PAIRS_FILE, TRACKS_FILE};

pub use mission::{generate_mission, nadir_rotation, GnssNoise, Mission, MissionPlan};
pub use render::{ground_color, ray_depth, render_image, render_tracks, true_depth, RenderedTracks, DEPTH_TOL, MARKER_TRACK_BASE};
pub use scene::{sampled_max_slope, Bump, Marker, MarkerPairTruth, SceneConfig, SyntheticScene, Terrain, MAX_SLOPE};

/// Ground-truth camera poses, one row per frame.
pub const TRUTH_POSES_FILE: &str = "truth_poses.csv";
/// `(track_id, frame_id)` of every injected outlier observation.
pub const OUTLIERS_FILE: &str = "outliers.csv";
/// Pipeline config written next to the simulated inputs.
pub const PIPELINE_CONFIG_FILE: &str = "pipeline.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub scene: SceneConfig,
    pub plan: MissionPlan,
    pub gnss: GnssNoise,
    /// Feature tracks to render; capped by the scene's feature count.
    pub n_features: usize,
    pub pixel_noise_sigma: f64,
    pub outlier_fraction: f64,
    /// Render images at this fraction of the camera resolution; 0 disables imagery.
    pub image_scale: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            plan: MissionPlan::default(),
            gnss: GnssNoise::default(),
            n_features: 30_000,
            pixel_noise_sigma: 0.5,
            outlier_fraction: 0.0,
            image_scale: 0.25,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.plan.validate()?;
        if self.n_features < 8 {
            return Err("n_features must be at least 8".into());
        }
        if !(self.pixel_noise_sigma >= 0.0) || !(0.0..=1.0).contains(&self.outlier_fraction) {
            return Err("pixel_noise_sigma must be >= 0 and outlier_fraction in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.image_scale) || !(0.0..=1.0).contains(&self.gnss.dropout) {
            return Err("image_scale and gnss.dropout must lie in [0, 1]".into());
        }
        let [x0, y0, x1, y1] = self.scene.bounds;
        if !(x1 > x0 && y1 > y0) || !(self.scene.feature_spacing > 0.0) {
            return Err("scene bounds must be non-empty and feature_spacing positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub scene: SyntheticScene,
    pub mission: Mission,
    pub tracks: RenderedTracks,
}

impl Simulation {
    pub fn marker_records(&self) -> Vec<MarkerRecord> {
        self.scene
            .markers
            .iter()
            .enumerate()
            .map(|(i, m)| MarkerRecord {
                marker_id: m.id.clone(),
                track_id: MARKER_TRACK_BASE + i as u64,
                x: m.position.x,
                y: m.position.y,
                z: m.position.z,
            })
            .collect()
    }

    pub fn marker_pair_records(&self) -> Vec<MarkerPairRecord> {
        self.scene
            .marker_pairs
            .iter()
            .map(|p| MarkerPairRecord {
                marker_a: self.scene.markers[p.a].id.clone(),
                marker_b: self.scene.markers[p.b].id.clone(),
                xy_separation_m: p.xy_separation,
                z_separation_m: p.z_separation,
            })
            .collect()
    }

    /// Writes the pipeline inputs plus ground truth into `dir`, and a
    /// `pipeline.toml` that reads `dir` and writes to `dir/out`.
    pub fn write(&self, dir: &Path) -> Result<(), IoError> {
        fs::create_dir_all(dir)?;
        let create = |name: &str| -> Result<BufWriter<fs::File>, IoError> { Ok(BufWriter::new(fs::File::create(dir.join(name))?)) };
        let mut w = create(FRAMES_FILE)?;
        io::write_frames(&mut w, &self.mission.frames)?;
        w.flush()?;
        let mut w = create(TRACKS_FILE)?;
        io::write_tracks(&mut w, &self.tracks.tracks)?;
        w.flush()?;
        io::write_csv(create(MARKERS_FILE)?, &self.marker_records())?;
        io::write_csv(create(MARKER_PAIRS_FILE)?, &self.marker_pair_records())?;
        let truth: Vec<io::FrameRecord> = self
            .mission
            .frames
            .iter()
            .map(|f| {
                let exact = crate::geometry::GnssPrior { pose: self.mission.truth[&f.id], sigma_position: 1.0 };
                io::FrameRecord::from_frame(&f.clone().with_prior(exact))
            })
            .collect();
        io::write_csv(create(TRUTH_POSES_FILE)?, &truth)?;
        #[derive(Serialize)]
        struct OutlierRow {
            track_id: u64,
            frame_id: u32,
        }
        let rows: Vec<OutlierRow> = self.tracks.outliers.iter().map(|(t, f)| OutlierRow { track_id: *t, frame_id: f.0 }).collect();
        io::write_csv(create(OUTLIERS_FILE)?, &rows)?;
        if self.mission.frames.iter().any(|f| f.image.is_some()) {
            fs::create_dir_all(dir.join(IMAGES_DIR))?;
            for f in &self.mission.frames {
                if let Some(img) = &f.image {
                    let mut w = create(&format!("{IMAGES_DIR}/{}.ppm", f.id))?;
                    io::write_ppm(&mut w, img)?;
                    w.flush()?;
                }
            }
        }
        let cfg = PipelineConfig { input: ".".into(), output: "out".into(), ..Default::default() };
        fs::write(dir.join(PIPELINE_CONFIG_FILE), cfg.to_toml())?;
        Ok(())
    }
}

/// Scene, trajectory, tracks and (optionally) images for one seed.
pub fn simulate(seed: u64, config: &SimConfig) -> Simulation {
    let scene = SyntheticScene::generate(seed, &config.scene);
    let mut mission = generate_mission(&scene, &config.plan, &config.gnss);
    let tracks = render_tracks(&scene, &mission, config.n_features, config.pixel_noise_sigma, config.outlier_fraction, seed);
    if config.image_scale > 0.0 {
        let truth: BTreeMap<FrameId, Pose> = mission.truth.clone();
        for f in &mut mission.frames {
            let img: RgbImage = render_image(&scene, &truth[&f.id], &f.intrinsics, config.image_scale);
            f.image = Some(Arc::new(img));
        }
    }
    Simulation { scene, mission, tracks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::validate_inputs;

    fn small() -> SimConfig {
        SimConfig {
            scene: SceneConfig { feature_spacing: 3.0, ..Default::default() },
            plan: MissionPlan { frames_per_strip: 8, ..Default::default() },
            image_scale: 0.05,
            ..Default::default()
        }
    }

    #[test]
    fn written_inputs_validate() {
        let sim = simulate(2, &small());
        let dir = tempfile::tempdir().unwrap();
        sim.write(dir.path()).unwrap();
        let input = validate_inputs(dir.path()).unwrap();
        assert_eq!(input.frames.len(), 8);
        assert_eq!(input.tracks.len(), sim.tracks.tracks.len());
        assert_eq!(input.markers.len(), 3);
        assert_eq!(input.marker_pairs.len(), 2);
        assert!(input.frames.iter().all(|f| f.image.is_some()));
        for (a, b) in input.tracks.iter().zip(&sim.tracks.tracks) {
            assert_eq!(a, b);
        }
        PipelineConfig::load(&dir.path().join(PIPELINE_CONFIG_FILE)).unwrap();
    }

    #[test]
    fn deterministic_output_files() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        simulate(5, &small()).write(a.path()).unwrap();
        simulate(5, &small()).write(b.path()).unwrap();
        for name in [FRAMES_FILE, TRACKS_FILE, MARKERS_FILE, TRUTH_POSES_FILE, "images/3.ppm"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
        }
    }
}
