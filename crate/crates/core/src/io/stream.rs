//! Text formats for the frame stream, tracks, markers and the global products.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Read, Write};

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::depth::parse;
use super::IoError;
use crate::ba::{Track, TrackId, TrackObservation};
use crate::fusion::{HeightRaster, PointCloud};
use crate::geometry::{CameraIntrinsics, Frame, FrameId, GnssPrior, Pose};
use crate::metrics::{MarkerErrors, QualityReport};

/// One problem in an input file. `line` is 1-based, 0 for whole-file issues.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub file: String,
    pub line: usize,
    pub message: String,
}

impl Diagnostic {
    pub fn new(file: &str, line: usize, message: impl Into<String>) -> Self {
        Self { file: file.to_string(), line, message: message.into() }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.file, self.line, self.message)
    }
}

/// A `frames.csv` row. The GNSS pose is the camera centre plus the
/// world-to-camera rotation as a unit quaternion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: u32,
    pub timestamp_s: f64,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub gnss_x: Option<f64>,
    pub gnss_y: Option<f64>,
    pub gnss_z: Option<f64>,
    pub gnss_qw: Option<f64>,
    pub gnss_qx: Option<f64>,
    pub gnss_qy: Option<f64>,
    pub gnss_qz: Option<f64>,
    pub gnss_sigma_m: Option<f64>,
}

impl FrameRecord {
    pub fn from_frame(f: &Frame) -> Self {
        let k = f.intrinsics;
        let (c, q, s) = match &f.gnss_prior {
            Some(p) => {
                let c = p.pose.center();
                let q = UnitQuaternion::from_rotation_matrix(&p.pose.rotation);
                (Some(c), Some(q), Some(p.sigma_position))
            }
            None => (None, None, None),
        };
        Self {
            frame_id: f.id.0,
            timestamp_s: f.timestamp,
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
            gnss_x: c.map(|c| c.x),
            gnss_y: c.map(|c| c.y),
            gnss_z: c.map(|c| c.z),
            gnss_qw: q.map(|q| q.w),
            gnss_qx: q.map(|q| q.i),
            gnss_qy: q.map(|q| q.j),
            gnss_qz: q.map(|q| q.k),
            gnss_sigma_m: s,
        }
    }

    fn to_frame(&self) -> Result<Frame, String> {
        let k = CameraIntrinsics { fx: self.fx, fy: self.fy, cx: self.cx, cy: self.cy, width: self.width, height: self.height };
        k.validate().map_err(|e| e.to_string())?;
        if !self.timestamp_s.is_finite() {
            return Err("timestamp is not finite".into());
        }
        let frame = Frame::new(FrameId(self.frame_id), self.timestamp_s, k);
        let g = [self.gnss_x, self.gnss_y, self.gnss_z, self.gnss_qw, self.gnss_qx, self.gnss_qy, self.gnss_qz, self.gnss_sigma_m];
        if g.iter().all(Option::is_none) {
            return Ok(frame);
        }
        let Some(g) = g.iter().copied().collect::<Option<Vec<f64>>>() else {
            return Err("GNSS fields must be all present or all empty".into());
        };
        if g.iter().any(|v| !v.is_finite()) {
            return Err("GNSS fields must be finite".into());
        }
        let q = Quaternion::new(g[3], g[4], g[5], g[6]);
        if (q.norm() - 1.0).abs() > 1e-6 {
            return Err(format!("GNSS quaternion norm {} is not 1", q.norm()));
        }
        if !(g[7] > 0.0) {
            return Err("gnss_sigma_m must be positive".into());
        }
        let r = UnitQuaternion::new_normalize(q).to_rotation_matrix();
        Ok(frame.with_prior(GnssPrior { pose: Pose::from_center(r, Vector3::new(g[0], g[1], g[2])), sigma_position: g[7] }))
    }
}

pub fn write_frames<W: Write>(w: W, frames: &[Frame]) -> Result<(), IoError> {
    let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    for f in frames {
        out.serialize(FrameRecord::from_frame(f)).map_err(csv_error)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> IoError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(e) => IoError::Io(e),
        other => IoError::format(line, format!("{other:?}")),
    }
}

/// Parses and checks `frames.csv`: schema, valid intrinsics, complete GNSS
/// blocks, unique ids and strictly increasing timestamps.
pub fn read_frames<R: Read>(r: R, file: &str) -> Result<Vec<Frame>, Vec<Diagnostic>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let mut diags = Vec::new();
    let mut frames: Vec<Frame> = Vec::new();
    let mut seen = BTreeSet::new();
    let headers = match reader.headers() {
        Ok(h) => h.clone(),
        Err(e) => return Err(vec![Diagnostic::new(file, 1, e.to_string())]),
    };
    for rec in reader.records() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line() as usize);
                diags.push(Diagnostic::new(file, line, e.to_string()));
                continue;
            }
        };
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let rec: FrameRecord = match rec.deserialize(Some(&headers)) {
            Ok(r) => r,
            Err(e) => {
                diags.push(Diagnostic::new(file, line, e.to_string()));
                continue;
            }
        };
        match rec.to_frame() {
            Ok(f) => {
                if !seen.insert(f.id) {
                    diags.push(Diagnostic::new(file, line, format!("duplicate frame id {}", f.id)));
                }
                if let Some(prev) = frames.last() {
                    if !(f.timestamp > prev.timestamp) {
                        diags.push(Diagnostic::new(
                            file,
                            line,
                            format!("timestamp {} does not increase (previous {})", f.timestamp, prev.timestamp),
                        ));
                    }
                }
                frames.push(f);
            }
            Err(m) => diags.push(Diagnostic::new(file, line, m)),
        }
    }
    if frames.is_empty() && diags.is_empty() {
        diags.push(Diagnostic::new(file, 0, "no frames"));
    }
    if diags.is_empty() {
        Ok(frames)
    } else {
        Err(diags)
    }
}

/// `track_id frame_id u v`, one observation per line, tracks in id order.
pub fn write_tracks<W: Write>(mut w: W, tracks: &[Track]) -> Result<(), IoError> {
    for t in tracks {
        for o in &t.observations {
            writeln!(w, "{} {} {} {}", t.track_id, o.frame_id, o.pixel.x, o.pixel.y)?;
        }
    }
    Ok(())
}

/// Parses `tracks.txt` against the known frames. Rejects unknown frames,
/// pixels outside `[0, width) × [0, height)` and repeated (track, frame)
/// pairs. Blank lines and `#` comments are skipped.
pub fn read_tracks<R: BufRead>(
    r: R,
    file: &str,
    intrinsics: &BTreeMap<FrameId, CameraIntrinsics>,
) -> Result<Vec<Track>, Vec<Diagnostic>> {
    let mut diags = Vec::new();
    let mut tracks: BTreeMap<TrackId, Vec<TrackObservation>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for (i, line) in r.lines().enumerate() {
        let n = i + 1;
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                diags.push(Diagnostic::new(file, n, e.to_string()));
                break;
            }
        };
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            diags.push(Diagnostic::new(file, n, format!("expected 4 fields, found {}", fields.len())));
            continue;
        }
        let parsed = (|| -> Result<_, IoError> {
            Ok((parse::<u64>(n, fields[0])?, parse::<u32>(n, fields[1])?, parse::<f64>(n, fields[2])?, parse::<f64>(n, fields[3])?))
        })();
        let (tid, fid, u, v) = match parsed {
            Ok(p) => p,
            Err(e) => {
                diags.push(Diagnostic::new(file, n, e.to_string()));
                continue;
            }
        };
        let fid = FrameId(fid);
        let Some(k) = intrinsics.get(&fid) else {
            diags.push(Diagnostic::new(file, n, format!("unknown frame {fid}")));
            continue;
        };
        if !k.contains(u, v) {
            diags.push(Diagnostic::new(file, n, format!("pixel ({u}, {v}) outside the {}x{} image of frame {fid}", k.width, k.height)));
            continue;
        }
        if !seen.insert((tid, fid)) {
            diags.push(Diagnostic::new(file, n, format!("duplicate observation of track {tid} in frame {fid}")));
            continue;
        }
        tracks.entry(tid).or_default().push(TrackObservation { frame_id: fid, pixel: Vector2::new(u, v) });
    }
    if tracks.is_empty() && diags.is_empty() {
        diags.push(Diagnostic::new(file, 0, "no observations"));
    }
    if !diags.is_empty() {
        return Err(diags);
    }
    Ok(tracks
        .into_iter()
        .map(|(id, mut obs)| {
            obs.sort_by_key(|o| o.frame_id);
            Track::new(id, obs)
        })
        .collect())
}

/// A `markers.csv` row: a marker, the track that observes it and a 3D
/// position (ground truth in simulator output, measured in pipeline output).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerRecord {
    pub marker_id: String,
    pub track_id: TrackId,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl MarkerRecord {
    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }
}

/// A `marker_pairs.csv` row with the ground-truth separations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerPairRecord {
    pub marker_a: String,
    pub marker_b: String,
    pub xy_separation_m: f64,
    pub z_separation_m: f64,
}

pub fn write_csv<W: Write, T: Serialize>(w: W, rows: &[T]) -> Result<(), IoError> {
    let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    for r in rows {
        out.serialize(r).map_err(csv_error)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv<R: Read, T: for<'de> Deserialize<'de>>(r: R, file: &str) -> Result<Vec<T>, Vec<Diagnostic>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let mut rows = Vec::new();
    let mut diags = Vec::new();
    for rec in reader.deserialize() {
        match rec {
            Ok(r) => rows.push(r),
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line() as usize);
                diags.push(Diagnostic::new(file, line, e.to_string()));
            }
        }
    }
    if diags.is_empty() {
        Ok(rows)
    } else {
        Err(diags)
    }
}

/// Per-pair marker results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerErrorRecord {
    pub marker_a: String,
    pub marker_b: String,
    pub measured_xy_m: f64,
    pub gt_xy_m: f64,
    pub rel_xy_pct: f64,
    pub e_xy_m: f64,
    pub measured_z_m: f64,
    pub gt_z_m: f64,
    pub rel_z_pct: f64,
    pub e_z_m: f64,
}

pub fn marker_error_records(errors: &MarkerErrors, gt: &[MarkerPairRecord]) -> Vec<MarkerErrorRecord> {
    errors
        .pairs
        .iter()
        .zip(gt)
        .map(|(p, g)| MarkerErrorRecord {
            marker_a: p.id_a.clone(),
            marker_b: p.id_b.clone(),
            measured_xy_m: p.measured_xy,
            gt_xy_m: g.xy_separation_m,
            rel_xy_pct: p.rel_xy,
            e_xy_m: p.e_xy,
            measured_z_m: p.measured_z,
            gt_z_m: g.z_separation_m,
            rel_z_pct: p.rel_z,
            e_z_m: p.e_z,
        })
        .collect()
}

/// Flat `key=value` lines.
pub fn write_report<W: Write>(mut w: W, q: &QualityReport, markers: Option<&MarkerErrors>) -> Result<(), IoError> {
    writeln!(w, "coverage={}", q.coverage)?;
    writeln!(w, "sigma_global_m={}", q.sigma_global)?;
    writeln!(w, "nmad_m={}", q.nmad)?;
    writeln!(w, "mean_local_std_m={}", q.mean_local_std)?;
    writeln!(w, "window_k={}", q.window_k)?;
    writeln!(w, "valid_cells={}", q.cell_count)?;
    if let Some(m) = markers {
        writeln!(w, "marker_pairs={}", m.pairs.len())?;
        writeln!(w, "marker_e_xy_m={}", m.e_xy)?;
        writeln!(w, "marker_e_z_m={}", m.e_z)?;
        writeln!(w, "marker_rel_xy_pct={}", m.rel_xy)?;
        writeln!(w, "marker_rel_z_pct={}", m.rel_z)?;
    }
    Ok(())
}

pub fn read_report<R: BufRead>(r: R) -> Result<BTreeMap<String, String>, IoError> {
    let mut out = BTreeMap::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| IoError::format(i + 1, "expected key=value"))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// ASCII PLY with six decimals per coordinate and optional RGB.
pub fn write_ply<W: Write>(mut w: W, cloud: &PointCloud) -> Result<(), IoError> {
    writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", cloud.len())?;
    writeln!(w, "property double x\nproperty double y\nproperty double z")?;
    if cloud.colors.is_some() {
        writeln!(w, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
    }
    writeln!(w, "end_header")?;
    for (i, p) in cloud.points.iter().enumerate() {
        match &cloud.colors {
            Some(c) => writeln!(w, "{:.6} {:.6} {:.6} {} {} {}", p.x, p.y, p.z, c[i][0], c[i][1], c[i][2])?,
            None => writeln!(w, "{:.6} {:.6} {:.6}", p.x, p.y, p.z)?,
        }
    }
    Ok(())
}

/// Sidecar describing how a DSM stored as `.fdepth` sits on the ground:
/// row 0 is the northern edge and `origin` is the top-left corner.
pub fn write_dsm_header<W: Write>(mut w: W, dsm: &HeightRaster) -> Result<(), IoError> {
    writeln!(w, "DSM 1")?;
    writeln!(w, "cell_size {}", dsm.cell_size)?;
    writeln!(w, "origin {} {}", dsm.origin.x, dsm.origin.y)?;
    writeln!(w, "layout north_up")?;
    Ok(())
}

/// Rebuilds a DSM from its `.fdepth` bytes and header.
pub fn read_dsm<R: BufRead>(fdepth: &[u8], header: R) -> Result<HeightRaster, IoError> {
    let lines: Vec<String> = header.lines().collect::<Result<_, _>>()?;
    if lines.first().map(|l| l.trim()) != Some("DSM 1") {
        return Err(IoError::format(1, "expected 'DSM 1'"));
    }
    let field = |n: usize, key: &str| -> Result<Vec<&str>, IoError> {
        let l = lines.get(n - 1).ok_or_else(|| IoError::format(n, format!("missing '{key}' line")))?;
        let mut it = l.split_whitespace();
        if it.next() != Some(key) {
            return Err(IoError::format(n, format!("expected '{key}'")));
        }
        Ok(it.collect())
    };
    let cs = field(2, "cell_size")?;
    let org = field(3, "origin")?;
    let layout = field(4, "layout")?;
    if cs.len() != 1 || org.len() != 2 || layout != ["north_up"] {
        return Err(IoError::format(0, "malformed DSM header"));
    }
    let cell_size: f64 = parse(2, cs[0])?;
    let origin = Vector2::new(parse(3, org[0])?, parse(3, org[1])?);
    let (cols, rows, values) = super::read_fdepth(fdepth)?;
    let mut dsm = HeightRaster::new(rows as usize, cols as usize, cell_size, origin).map_err(|e| IoError::format(0, e.to_string()))?;
    dsm.data = values.into_iter().map(|v| v.map_or(f64::NAN, f64::from)).collect();
    Ok(dsm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics { fx: 466.8, fy: 466.8, cx: 319.5, cy: 179.5, width: 640, height: 360 }
    }

    fn frames() -> Vec<Frame> {
        let r = Rotation3::from_euler_angles(0.01, -0.02, 1.3);
        vec![
            Frame::new(FrameId(0), 0.0, k()).with_prior(GnssPrior { pose: Pose::from_center(r, Vector3::new(1.5, -2.25, 50.125)), sigma_position: 0.05 }),
            Frame::new(FrameId(1), 0.685, k()),
        ]
    }

    #[test]
    fn frames_round_trip() {
        let mut buf = Vec::new();
        write_frames(&mut buf, &frames()).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("frame_id,timestamp_s,fx,fy,cx,cy,width,height,gnss_x,"));
        assert!(text.lines().nth(2).unwrap().ends_with(",,,,,,,,"));
        let back = read_frames(&buf[..], "frames.csv").unwrap();
        assert_eq!(back.len(), 2);
        let (a, b) = (frames()[0].gnss_prior.unwrap(), back[0].gnss_prior.unwrap());
        assert!((a.pose.center() - b.pose.center()).norm() < 1e-12);
        assert!(a.pose.rotation_distance(&b.pose) < 1e-12);
        assert!(back[1].gnss_prior.is_none());
    }

    #[test]
    fn frame_diagnostics_cite_lines() {
        let mut buf = Vec::new();
        let mut fs = frames();
        fs[1].timestamp = 0.0;
        write_frames(&mut buf, &fs).unwrap();
        let d = read_frames(&buf[..], "frames.csv").unwrap_err();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].line, 3);
        assert!(d[0].message.contains("does not increase"));
        let partial = "frame_id,timestamp_s,fx,fy,cx,cy,width,height,gnss_x,gnss_y,gnss_z,gnss_qw,gnss_qx,gnss_qy,gnss_qz,gnss_sigma_m\n\
                       0,0,500,500,320,180,640,360,1,2,,,,,,\n";
        let d = read_frames(partial.as_bytes(), "f").unwrap_err();
        assert_eq!((d[0].line, d[0].message.contains("all present")), (2, true));
    }

    #[test]
    fn track_diagnostics() {
        let ks: BTreeMap<_, _> = [(FrameId(0), k()), (FrameId(2), k())].into();
        let text = "1 0 10 20\n\n7 2 5.5 6.5\n7 2 6 7\n3 0 -3 4\n4 9 1 1\n5 0 x 1\n";
        let d = read_tracks(text.as_bytes(), "tracks.txt", &ks).unwrap_err();
        let lines: Vec<usize> = d.iter().map(|d| d.line).collect();
        assert_eq!(lines, vec![4, 5, 6, 7]);
        assert!(d[0].message.contains("duplicate observation of track 7 in frame 2"));
        assert!(d[1].message.contains("outside"));
        assert!(read_tracks("".as_bytes(), "t", &ks).is_err());
        let ok = read_tracks("2 2 1 1\n2 0 3 4\n1 0 0 0\n".as_bytes(), "t", &ks).unwrap();
        assert_eq!(ok.len(), 2);
        assert_eq!(ok[1].observations[0].frame_id, FrameId(0));
        let mut buf = Vec::new();
        write_tracks(&mut buf, &ok).unwrap();
        assert_eq!(read_tracks(&buf[..], "t", &ks).unwrap(), ok);
    }

    #[test]
    fn dsm_round_trip() {
        let mut dsm = HeightRaster::new(2, 3, 0.25, Vector2::new(-1.0, 4.0)).unwrap();
        dsm.data = vec![1.0, f64::NAN, 2.5, 3.0, 4.0, f64::NAN];
        let mut bytes = Vec::new();
        super::super::write_fdepth(&mut bytes, 3, 2, dsm.values()).unwrap();
        let mut hdr = Vec::new();
        write_dsm_header(&mut hdr, &dsm).unwrap();
        assert_eq!(String::from_utf8(hdr.clone()).unwrap().lines().count(), 4);
        let back = read_dsm(&bytes, &hdr[..]).unwrap();
        assert_eq!((back.rows, back.cols, back.cell_size, back.origin), (2, 3, 0.25, dsm.origin));
        assert_eq!(back.values().collect::<Vec<_>>(), dsm.values().collect::<Vec<_>>());
    }

    #[test]
    fn ply_has_six_decimals() {
        let cloud = PointCloud { points: vec![Vector3::new(1.0, -2.5, 1.0 / 3.0)], colors: None };
        let mut buf = Vec::new();
        write_ply(&mut buf, &cloud).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("element vertex 1\n"));
        assert!(text.ends_with("end_header\n1.000000 -2.500000 0.333333\n"));
    }
}
