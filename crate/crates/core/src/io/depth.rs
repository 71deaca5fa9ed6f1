//! Sparse (`.sdepth`) and dense (`.fdepth`) depth rasters, plus the
//! `camera.txt` exchange file.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use nalgebra::{Matrix3, Vector3};

use super::IoError;
use crate::anchor::{AnchorCell, AnchorMap};
use crate::geometry::{CameraIntrinsics, Pose};

const SDEPTH_MAGIC: &str = "SDEPTH 1";
const FDEPTH_MAGIC: &str = "FDEPTH 1";

pub fn write_sdepth<W: Write>(mut w: W, map: &AnchorMap) -> Result<(), IoError> {
    writeln!(w, "{SDEPTH_MAGIC}")?;
    writeln!(w, "{} {}", map.width, map.height)?;
    for (&(u, v), c) in &map.cells {
        writeln!(w, "{u} {v} {} {}", c.depth, c.uncertainty)?;
    }
    Ok(())
}

/// Sparse cells keyed by `(u, v)` together with the raster size.
pub type SparseDepth = (u32, u32, BTreeMap<(u32, u32), AnchorCell>);

pub fn read_sdepth<R: BufRead>(r: R) -> Result<SparseDepth, IoError> {
    let mut lines = r.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String), IoError> {
        lines
            .next()
            .map(|(i, l)| l.map(|l| (i + 1, l)))
            .transpose()?
            .ok_or_else(|| IoError::format(0, format!("missing {what}")))
    };
    let (n, magic) = next("magic line")?;
    if magic.trim_end() != SDEPTH_MAGIC {
        return Err(IoError::format(n, format!("expected '{SDEPTH_MAGIC}'")));
    }
    let (n, dims) = next("dimensions")?;
    let (width, height) = parse_dims(n, &dims)?;
    let mut cells = BTreeMap::new();
    for (i, line) in lines {
        let line = line?;
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(IoError::format(n, "expected 'u v depth_m sigma_m'"));
        }
        let u: u32 = parse(n, f[0])?;
        let v: u32 = parse(n, f[1])?;
        let depth: f64 = parse(n, f[2])?;
        let uncertainty: f64 = parse(n, f[3])?;
        if u >= width || v >= height {
            return Err(IoError::format(n, format!("cell ({u}, {v}) outside {width}x{height}")));
        }
        if !(depth > 0.0 && depth.is_finite()) {
            return Err(IoError::format(n, format!("depth {depth} must be positive")));
        }
        if cells.insert((u, v), AnchorCell { depth, uncertainty }).is_some() {
            return Err(IoError::format(n, format!("duplicate cell ({u}, {v})")));
        }
    }
    Ok((width, height, cells))
}

/// Writes a row-major raster; `None` cells are stored as NaN.
pub fn write_fdepth<W: Write>(mut w: W, width: u32, height: u32, values: impl Iterator<Item = Option<f64>>) -> Result<(), IoError> {
    writeln!(w, "{FDEPTH_MAGIC}")?;
    writeln!(w, "{width} {height}")?;
    let mut buf = Vec::with_capacity(width as usize * height as usize * 4);
    let mut count = 0usize;
    for v in values {
        buf.extend_from_slice(&v.map_or(f32::NAN, |x| x as f32).to_le_bytes());
        count += 1;
    }
    if count != width as usize * height as usize {
        return Err(IoError::format(0, format!("raster has {count} values, expected {width}x{height}")));
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads a dense raster; NaN cells come back as `None`.
pub fn read_fdepth(bytes: &[u8]) -> Result<(u32, u32, Vec<Option<f32>>), IoError> {
    let mut pos = 0;
    let mut line = |n: usize| -> Result<&str, IoError> {
        let end = bytes[pos..].iter().position(|&b| b == b'\n').ok_or_else(|| IoError::format(n, "truncated header"))?;
        let s = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| IoError::format(n, "header is not UTF-8"))?;
        pos += end + 1;
        Ok(s)
    };
    if line(1)?.trim_end() != FDEPTH_MAGIC {
        return Err(IoError::format(1, format!("expected '{FDEPTH_MAGIC}'")));
    }
    let (width, height) = parse_dims(2, line(2)?)?;
    let body = &bytes[pos..];
    let n = width as usize * height as usize;
    if body.len() != n * 4 {
        return Err(IoError::format(3, format!("payload is {} bytes, expected {}", body.len(), n * 4)));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| {
            let x = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            (!x.is_nan()).then_some(x)
        })
        .collect();
    Ok((width, height, values))
}

/// `fx fy cx cy` / rotation row-major / translation, one group per line.
pub fn write_camera<W: Write>(mut w: W, k: &CameraIntrinsics, pose: &Pose) -> Result<(), IoError> {
    writeln!(w, "{} {} {} {}", k.fx, k.fy, k.cx, k.cy)?;
    let r = pose.rotation.matrix();
    let row: Vec<String> = (0..3).flat_map(|i| (0..3).map(move |j| r[(i, j)].to_string())).collect();
    writeln!(w, "{}", row.join(" "))?;
    let t = pose.translation;
    writeln!(w, "{} {} {}", t.x, t.y, t.z)?;
    Ok(())
}

/// Parses `camera.txt`; raster size comes from the accompanying depth file.
pub fn read_camera<R: BufRead>(r: R, width: u32, height: u32) -> Result<(CameraIntrinsics, Pose), IoError> {
    let mut nums = Vec::with_capacity(16);
    for (i, line) in r.lines().enumerate() {
        for tok in line?.split_whitespace() {
            nums.push(parse::<f64>(i + 1, tok)?);
        }
    }
    if nums.len() != 16 {
        return Err(IoError::format(0, format!("camera file holds {} numbers, expected 16", nums.len())));
    }
    let k = CameraIntrinsics::new(nums[0], nums[1], nums[2], nums[3], width, height).map_err(|e| IoError::format(1, e.to_string()))?;
    let r = Matrix3::from_row_slice(&nums[4..13]);
    let pose = Pose::from_matrix(r, Vector3::new(nums[13], nums[14], nums[15])).map_err(|e| IoError::format(2, e.to_string()))?;
    Ok((k, pose))
}

fn parse_dims(n: usize, s: &str) -> Result<(u32, u32), IoError> {
    let f: Vec<&str> = s.split_whitespace().collect();
    if f.len() != 2 {
        return Err(IoError::format(n, "expected 'width height'"));
    }
    let (w, h): (u32, u32) = (parse(n, f[0])?, parse(n, f[1])?);
    if w == 0 || h == 0 {
        return Err(IoError::format(n, "empty raster"));
    }
    Ok((w, h))
}

pub(crate) fn parse<T: std::str::FromStr>(line: usize, s: &str) -> Result<T, IoError> {
    s.trim().parse().map_err(|_| IoError::format(line, format!("cannot parse '{s}'")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::FrameId;
    use nalgebra::{Rotation3, Vector3};

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(466.8, 466.8, 319.5, 179.5, 640, 360).unwrap()
    }

    #[test]
    fn sdepth_round_trip_is_lossless() {
        let pose = Pose::new(Rotation3::from_euler_angles(0.1, -0.2, 0.3), Vector3::new(1.0, 2.0, 3.0));
        let mut map = AnchorMap::new(FrameId(4), pose, k());
        map.insert(0, 0, AnchorCell { depth: 50.123456789012345, uncertainty: 0.01 });
        map.insert(639, 359, AnchorCell { depth: 1.0 / 3.0, uncertainty: 1e-7 });
        let mut buf = Vec::new();
        write_sdepth(&mut buf, &map).unwrap();
        let (w, h, cells) = read_sdepth(&buf[..]).unwrap();
        assert_eq!((w, h), (640, 360));
        assert_eq!(cells, map.cells);
    }

    #[test]
    fn sdepth_rejects_bad_records() {
        assert!(read_sdepth(&b"SDEPTH 2\n4 4\n"[..]).is_err());
        let err = read_sdepth(&b"SDEPTH 1\n4 4\n1 1 2.0 0.1\n4 0 1.0 0.1\n"[..]).unwrap_err();
        assert!(err.to_string().contains("line 4"), "{err}");
        assert!(read_sdepth(&b"SDEPTH 1\n4 4\n1 1 -2.0 0.1\n"[..]).is_err());
        assert!(read_sdepth(&b"SDEPTH 1\n4 4\n1 1 2.0 0.1\n1 1 3.0 0.1\n"[..]).is_err());
    }

    #[test]
    fn fdepth_layout() {
        let mut buf = Vec::new();
        write_fdepth(&mut buf, 2, 2, [Some(1.5), None, Some(-0.0), Some(1e30)].into_iter()).unwrap();
        assert!(buf.starts_with(b"FDEPTH 1\n2 2\n"));
        let body = &buf[13..];
        assert_eq!(body.len(), 16);
        assert_eq!(&body[0..4], &1.5f32.to_le_bytes());
        assert!(f32::from_le_bytes(body[4..8].try_into().unwrap()).is_nan());
        let (w, h, v) = read_fdepth(&buf).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(v, vec![Some(1.5), None, Some(-0.0), Some(1e30)]);
        assert!(write_fdepth(Vec::new(), 2, 2, [Some(1.0)].into_iter()).is_err());
        assert!(read_fdepth(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn camera_round_trip() {
        let pose = Pose::new(Rotation3::from_euler_angles(0.4, 0.1, -1.3), Vector3::new(-7.0, 0.25, 51.0));
        let mut buf = Vec::new();
        write_camera(&mut buf, &k(), &pose).unwrap();
        assert_eq!(String::from_utf8_lossy(&buf).lines().count(), 3);
        let (k2, p2) = read_camera(&buf[..], 640, 360).unwrap();
        assert_eq!(k2, k());
        assert!((p2.rotation.matrix() - pose.rotation.matrix()).norm() < 1e-15);
        assert_eq!(p2.translation, pose.translation);
    }
}
