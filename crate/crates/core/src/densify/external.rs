//! File-exchange adapter for out-of-process densifiers.
//!
//! The request directory holds `anchor.sdepth`, `camera.txt` and optionally
//! `image.ppm`. The worker answers with `depth.fdepth` and then an empty
//! `done` file. Every returned raster is checked against the anchors before
//! it is accepted.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use image::RgbImage;

use super::{verify_anchor_agreement, Densifier, DensifierConfig, DensifyError, DepthMap, IdwDensifier};
use crate::anchor::AnchorMap;
use crate::io;

pub const REQUEST_ANCHOR: &str = "anchor.sdepth";
pub const REQUEST_CAMERA: &str = "camera.txt";
pub const REQUEST_IMAGE: &str = "image.ppm";
pub const RESPONSE_DEPTH: &str = "depth.fdepth";
pub const DONE_FILE: &str = "done";

const POLL: Duration = Duration::from_millis(5);

static REQUEST_COUNTER: AtomicU64 = AtomicU64::new(0);

pub struct ExternalDensifier {
    pub command: Vec<String>,
    pub timeout: Duration,
    pub work_dir: PathBuf,
    pub tol: f64,
    pub max_depth: f64,
}

impl ExternalDensifier {
    pub fn from_config(config: &DensifierConfig) -> Self {
        Self {
            command: config.external_command.clone(),
            timeout: Duration::from_secs_f64(config.external_timeout_s),
            work_dir: config.external_work_dir.clone().unwrap_or_else(std::env::temp_dir),
            tol: config.anchor_agreement_tol,
            max_depth: config.max_depth,
        }
    }

    fn request_dir(&self, anchor: &AnchorMap) -> Result<PathBuf, DensifyError> {
        let n = REQUEST_COUNTER.fetch_add(1, Ordering::Relaxed);
        let dir = self.work_dir.join(format!("densify-{}-{}-{n}", std::process::id(), anchor.frame_id));
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn run_worker(&self, dir: &Path) -> Result<(), DensifyError> {
        let (program, args) = self.command.split_first().ok_or_else(|| DensifyError::InvalidConfig("empty external_command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .arg(dir)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .spawn()
            .map_err(|e| DensifyError::External(format!("cannot start '{program}': {e}")))?;
        let start = Instant::now();
        let done = dir.join(DONE_FILE);
        loop {
            if done.exists() {
                break;
            }
            if let Some(status) = child.try_wait()? {
                if done.exists() {
                    break;
                }
                return Err(DensifyError::External(format!("worker exited with {status} before writing '{DONE_FILE}'")));
            }
            if start.elapsed() >= self.timeout {
                let _ = child.kill();
                let _ = child.wait();
                return Err(DensifyError::ExternalTimeout(self.timeout));
            }
            std::thread::sleep(POLL);
        }
        // the worker may still be flushing; give it the rest of the budget to exit
        while child.try_wait()?.is_none() {
            if start.elapsed() >= self.timeout {
                let _ = child.kill();
                let _ = child.wait();
                break;
            }
            std::thread::sleep(POLL);
        }
        Ok(())
    }
}

impl Densifier for ExternalDensifier {
    fn id(&self) -> &str {
        "external"
    }

    fn densify(&self, image: Option<&RgbImage>, anchor: &AnchorMap) -> Result<DepthMap, DensifyError> {
        if anchor.is_empty() {
            return Err(DensifyError::EmptyAnchor(anchor.frame_id));
        }
        let dir = self.request_dir(anchor)?;
        write_request(&dir, anchor, image)?;
        self.run_worker(&dir)?;
        let bytes = fs::read(dir.join(RESPONSE_DEPTH))?;
        let (w, h, values) = io::read_fdepth(&bytes)?;
        if (w, h) != (anchor.width, anchor.height) {
            return Err(DensifyError::DimensionMismatch { depth: (w, h, anchor.frame_id), anchor: (anchor.width, anchor.height, anchor.frame_id) });
        }
        let depth = DepthMap {
            width: w,
            height: h,
            depth: values.iter().map(|v| v.map_or(f64::NAN, f64::from)).collect(),
            valid_mask: values.iter().map(Option::is_some).collect(),
            frame_id: anchor.frame_id,
            pose: anchor.pose,
            intrinsics: anchor.intrinsics,
            producer: self.id().to_string(),
        };
        let report = verify_anchor_agreement(&depth, anchor, self.tol)?;
        let out_of_range = depth.values().flatten().filter(|&z| !(z > 0.0 && z <= self.max_depth && z.is_finite())).count();
        if !report.violating_cells.is_empty() || out_of_range > 0 {
            return Err(DensifyError::ContractViolation {
                max_rel_dev: report.max_rel_dev,
                violating_cells: report.violating_cells.len(),
                out_of_range,
            });
        }
        let _ = fs::remove_dir_all(&dir);
        Ok(depth)
    }
}

fn write_request(dir: &Path, anchor: &AnchorMap, image: Option<&RgbImage>) -> Result<(), DensifyError> {
    io::write_sdepth(BufWriter::new(fs::File::create(dir.join(REQUEST_ANCHOR))?), anchor)?;
    io::write_camera(BufWriter::new(fs::File::create(dir.join(REQUEST_CAMERA))?), &anchor.intrinsics, &anchor.pose)?;
    if let Some(img) = image {
        io::write_ppm(BufWriter::new(fs::File::create(dir.join(REQUEST_IMAGE))?), img)?;
    }
    Ok(())
}

/// Reads a request directory back into an anchor map.
pub fn read_request(dir: &Path) -> Result<AnchorMap, DensifyError> {
    let (w, h, cells) = io::read_sdepth(BufReader::new(fs::File::open(dir.join(REQUEST_ANCHOR))?))?;
    let (k, pose) = io::read_camera(BufReader::new(fs::File::open(dir.join(REQUEST_CAMERA))?), w, h)?;
    let mut map = AnchorMap::new(crate::geometry::FrameId(0), pose, k);
    map.cells = cells;
    Ok(map)
}

/// Reference worker: answers a request with idw depth multiplied by `scale`
/// (1.0 for an honest answer; anything else breaks the anchor contract).
pub fn serve_request(dir: &Path, scale: f64) -> Result<(), DensifyError> {
    let anchor = read_request(dir)?;
    let depth = IdwDensifier { max_depth: f64::INFINITY }.densify(None, &anchor)?;
    let tmp = dir.join(format!("{RESPONSE_DEPTH}.part"));
    io::write_fdepth(BufWriter::new(fs::File::create(&tmp)?), depth.width, depth.height, depth.values().map(|v| v.map(|z| z * scale)))?;
    fs::rename(&tmp, dir.join(RESPONSE_DEPTH))?;
    fs::File::create(dir.join(DONE_FILE))?;
    Ok(())
}
