//! Sparse metric anchor maps: BA tie points rasterized into the
//! representative frame as camera-frame depths.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::ba::BaSolution;
use crate::geometry::{back_project, CameraIntrinsics, Frame, FrameId, Pose};
use nalgebra::{Vector2, Vector3};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnchorError {
    #[error("no tie point projects into frame {0}")]
    EmptyAnchor(FrameId),
    #[error("representative frame {0} has no pose in the BA solution")]
    MissingPose(FrameId),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorCell {
    /// Camera-frame z (meters).
    pub depth: f64,
    /// 1σ (meters).
    pub uncertainty: f64,
}

/// Sparse depth raster at full representative-frame resolution, keyed by
/// integer pixel `(u, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorMap {
    pub width: u32,
    pub height: u32,
    pub cells: BTreeMap<(u32, u32), AnchorCell>,
    pub frame_id: FrameId,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
}

impl AnchorMap {
    pub fn new(frame_id: FrameId, pose: Pose, intrinsics: CameraIntrinsics) -> Self {
        Self { width: intrinsics.width, height: intrinsics.height, cells: BTreeMap::new(), frame_id, pose, intrinsics }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Writes a cell under the nearest-surface rule: the smaller depth wins.
    pub fn insert(&mut self, u: u32, v: u32, cell: AnchorCell) {
        debug_assert!(u < self.width && v < self.height && cell.depth > 0.0);
        self.cells
            .entry((u, v))
            .and_modify(|c| {
                if cell.depth < c.depth {
                    *c = cell;
                }
            })
            .or_insert(cell);
    }

    pub fn fill_fraction(&self) -> f64 {
        self.cells.len() as f64 / (self.width as f64 * self.height as f64)
    }

    /// World point of an anchor cell.
    pub fn world_point(&self, u: u32, v: u32) -> Option<Vector3<f64>> {
        let c = self.cells.get(&(u, v))?;
        Some(back_project(&self.intrinsics, &self.pose, &Vector2::new(u as f64, v as f64), c.depth))
    }
}

/// Projects every tie point of `solution` into `representative` and keeps,
/// per nearest-integer pixel, the smallest depth.
pub fn build_anchor_map(solution: &BaSolution, representative: &Frame) -> Result<AnchorMap, AnchorError> {
    let pose = *solution.poses.get(&representative.id).ok_or(AnchorError::MissingPose(representative.id))?;
    let k = representative.intrinsics;
    let mut map = AnchorMap::new(representative.id, pose, k);
    for tp in solution.points.values() {
        let pc = pose.transform(&tp.position);
        if !(pc.z > 0.0) {
            continue;
        }
        let u = (k.fx * pc.x / pc.z + k.cx).round();
        let v = (k.fy * pc.y / pc.z + k.cy).round();
        if u < 0.0 || v < 0.0 || u >= k.width as f64 || v >= k.height as f64 {
            continue;
        }
        map.insert(u as u32, v as u32, AnchorCell { depth: pc.z, uncertainty: tp.uncertainty });
    }
    if map.is_empty() {
        return Err(AnchorError::EmptyAnchor(representative.id));
    }
    Ok(map)
}

fn occupied_fraction(map: &AnchorMap, xs: &[u32], ys: &[u32]) -> f64 {
    let (nx, ny) = (xs.len() - 1, ys.len() - 1);
    if nx == 0 || ny == 0 {
        return 0.0;
    }
    let tile_of = |edges: &[u32], p: u32| edges.partition_point(|&e| e <= p) - 1;
    let mut hit = vec![false; nx * ny];
    for &(u, v) in map.cells.keys() {
        hit[tile_of(ys, v) * nx + tile_of(xs, u)] = true;
    }
    hit.iter().filter(|&&h| h).count() as f64 / hit.len() as f64
}

/// Fraction of `tile × tile` pixel tiles holding at least one anchor; the last
/// row and column of tiles may be partial.
pub fn anchor_coverage(map: &AnchorMap, tile: u32) -> f64 {
    let tile = tile.max(1);
    let edges = |n: u32| (0..n.div_ceil(tile)).map(|i| i * tile).chain(std::iter::once(n)).collect::<Vec<_>>();
    occupied_fraction(map, &edges(map.width), &edges(map.height))
}

/// Same as [`anchor_coverage`] on an `nx × ny` grid of near-equal tiles.
pub fn anchor_grid_coverage(map: &AnchorMap, nx: u32, ny: u32) -> f64 {
    let edges = |n: u32, parts: u32| {
        let parts = parts.clamp(1, n);
        (0..=parts).map(|i| (i as u64 * n as u64 / parts as u64) as u32).collect::<Vec<_>>()
    };
    occupied_fraction(map, &edges(map.width, nx), &edges(map.height, ny))
}
