//! Loading and checking an input directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::BufReader;
use std::path::Path;
use std::sync::Arc;

use log::warn;

use crate::ba::Track;
use crate::geometry::{CameraIntrinsics, Frame, FrameId};
use crate::io::{read_csv, read_frames, read_ppm, read_tracks, Diagnostic, MarkerPairRecord, MarkerRecord};

pub const FRAMES_FILE: &str = "frames.csv";
pub const TRACKS_FILE: &str = "tracks.txt";
pub const MARKERS_FILE: &str = "markers.csv";
pub const MARKER_PAIRS_FILE: &str = "marker_pairs.csv";
/// Optional imagery, one `<frame_id>.ppm` per frame.
pub const IMAGES_DIR: &str = "images";

#[derive(Debug, Clone)]
pub struct InputStream {
    pub frames: Vec<Frame>,
    pub tracks: Vec<Track>,
    pub markers: Vec<MarkerRecord>,
    pub marker_pairs: Vec<MarkerPairRecord>,
}

fn open(dir: &Path, name: &str, diags: &mut Vec<Diagnostic>) -> Option<fs::File> {
    match fs::File::open(dir.join(name)) {
        Ok(f) => Some(f),
        Err(e) => {
            diags.push(Diagnostic::new(name, 0, e.to_string()));
            None
        }
    }
}

/// Reads and checks every input file, collecting all diagnostics before
/// failing. Markers are optional but must come with their pairs.
pub fn validate_inputs(dir: &Path) -> Result<InputStream, Vec<Diagnostic>> {
    let mut diags = Vec::new();
    let frames = open(dir, FRAMES_FILE, &mut diags).and_then(|f| read_frames(f, FRAMES_FILE).map_err(|d| diags.extend(d)).ok());
    let Some(mut frames) = frames else { return Err(diags) };
    let intrinsics: BTreeMap<FrameId, CameraIntrinsics> = frames.iter().map(|f| (f.id, f.intrinsics)).collect();
    let tracks = open(dir, TRACKS_FILE, &mut diags)
        .and_then(|f| read_tracks(BufReader::new(f), TRACKS_FILE, &intrinsics).map_err(|d| diags.extend(d)).ok());

    let (mut markers, mut marker_pairs) = (Vec::new(), Vec::new());
    let (has_m, has_p) = (dir.join(MARKERS_FILE).exists(), dir.join(MARKER_PAIRS_FILE).exists());
    if has_m != has_p {
        let missing = if has_m { MARKER_PAIRS_FILE } else { MARKERS_FILE };
        diags.push(Diagnostic::new(missing, 0, "markers and marker pairs must be given together"));
    } else if has_m {
        if let Some(f) = open(dir, MARKERS_FILE, &mut diags) {
            match read_csv::<_, MarkerRecord>(f, MARKERS_FILE) {
                Ok(m) => markers = m,
                Err(d) => diags.extend(d),
            }
        }
        if let Some(f) = open(dir, MARKER_PAIRS_FILE, &mut diags) {
            match read_csv::<_, MarkerPairRecord>(f, MARKER_PAIRS_FILE) {
                Ok(p) => marker_pairs = p,
                Err(d) => diags.extend(d),
            }
        }
        let ids: BTreeSet<&str> = markers.iter().map(|m| m.marker_id.as_str()).collect();
        if ids.len() != markers.len() {
            diags.push(Diagnostic::new(MARKERS_FILE, 0, "duplicate marker id"));
        }
        for (i, p) in marker_pairs.iter().enumerate() {
            for id in [&p.marker_a, &p.marker_b] {
                if !ids.contains(id.as_str()) {
                    diags.push(Diagnostic::new(MARKER_PAIRS_FILE, i + 2, format!("unknown marker '{id}'")));
                }
            }
            if !(p.xy_separation_m > 0.0 && p.z_separation_m > 0.0) {
                diags.push(Diagnostic::new(MARKER_PAIRS_FILE, i + 2, "separations must be positive"));
            }
        }
    }

    let images = dir.join(IMAGES_DIR);
    if images.is_dir() {
        for f in &mut frames {
            let name = format!("{IMAGES_DIR}/{}.ppm", f.id);
            let path = dir.join(&name);
            if !path.exists() {
                continue;
            }
            match fs::File::open(&path).map_err(|e| e.to_string()).and_then(|h| read_ppm(BufReader::new(h)).map_err(|e| e.to_string())) {
                Ok(img) => f.image = Some(Arc::new(img)),
                Err(e) => diags.push(Diagnostic::new(&name, 0, e)),
            }
        }
    }
    let tracks = tracks.unwrap_or_default();
    let known: BTreeSet<u64> = tracks.iter().map(|t| t.track_id).collect();
    for m in &markers {
        if !known.contains(&m.track_id) {
            warn!("marker {} refers to track {} which has no observations", m.marker_id, m.track_id);
        }
    }
    if diags.is_empty() {
        Ok(InputStream { frames, tracks, markers, marker_pairs })
    } else {
        Err(diags)
    }
}
