//! Sparse truncated signed distance volume stored in 8³ bricks.

use std::collections::HashMap;

use rayon::prelude::*;

use nalgebra::{Vector2, Vector3};

use super::FusionError;
use crate::densify::DepthMap;
use crate::geometry::back_project;

pub const BRICK: i64 = 8;
const BRICK_VOXELS: usize = (BRICK * BRICK * BRICK) as usize;
pub const DEFAULT_MAX_WEIGHT: f64 = 64.0;

#[derive(Debug, Clone)]
struct Brick {
    sdf: [f64; BRICK_VOXELS],
    weight: [f64; BRICK_VOXELS],
}

impl Brick {
    fn empty() -> Box<Self> {
        Box::new(Self { sdf: [0.0; BRICK_VOXELS], weight: [0.0; BRICK_VOXELS] })
    }
}

fn split(i: [i64; 3]) -> ([i64; 3], usize) {
    let b = [i[0].div_euclid(BRICK), i[1].div_euclid(BRICK), i[2].div_euclid(BRICK)];
    let l = [i[0].rem_euclid(BRICK), i[1].rem_euclid(BRICK), i[2].rem_euclid(BRICK)];
    (b, ((l[2] * BRICK + l[1]) * BRICK + l[0]) as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct IntegrationStats {
    pub updated_voxels: usize,
    pub new_voxels: usize,
    /// Band voxels that fell outside the volume bounds.
    pub clipped_voxels: usize,
}

/// Voxel `i` covers `origin + voxel_size·[i, i+1)` per axis; its sample
/// point is the centre. Indices run over `[0, extent)`.
#[derive(Debug, Clone)]
pub struct TsdfVolume {
    pub origin: Vector3<f64>,
    pub voxel_size: f64,
    pub truncation: f64,
    pub extent: [i64; 3],
    pub max_weight: f64,
    /// Grow the bounds to admit voxels outside them instead of clipping.
    pub auto_grow: bool,
    bricks: HashMap<[i64; 3], Box<Brick>>,
    /// Offset from storage indices to current volume indices; changes when
    /// the volume grows towards negative coordinates.
    shift: [i64; 3],
}

impl TsdfVolume {
    pub fn new(origin: Vector3<f64>, voxel_size: f64, truncation: f64, extent: [i64; 3]) -> Result<Self, FusionError> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(FusionError::InvalidVolume("voxel_size must be positive".into()));
        }
        if !(truncation >= 2.0 * voxel_size) || !truncation.is_finite() {
            return Err(FusionError::InvalidVolume("truncation must be at least twice the voxel size".into()));
        }
        if extent.iter().any(|&e| e <= 0) {
            return Err(FusionError::InvalidVolume("extent must be positive on every axis".into()));
        }
        Ok(Self {
            origin,
            voxel_size,
            truncation,
            extent,
            max_weight: DEFAULT_MAX_WEIGHT,
            auto_grow: false,
            bricks: HashMap::new(),
            shift: [0; 3],
        })
    }

    /// Volume covering the axis-aligned box `[lo, hi]`, with truncation of
    /// three voxels.
    pub fn covering(lo: Vector3<f64>, hi: Vector3<f64>, voxel_size: f64) -> Result<Self, FusionError> {
        let ext = (hi - lo) / voxel_size;
        let extent = [ext.x.ceil().max(1.0) as i64, ext.y.ceil().max(1.0) as i64, ext.z.ceil().max(1.0) as i64];
        Self::new(lo, voxel_size, 3.0 * voxel_size, extent)
    }

    pub fn voxel_center(&self, i: [i64; 3]) -> Vector3<f64> {
        self.origin + Vector3::new(i[0] as f64 + 0.5, i[1] as f64 + 0.5, i[2] as f64 + 0.5) * self.voxel_size
    }

    pub fn voxel_of(&self, p: &Vector3<f64>) -> [i64; 3] {
        let q = (p - self.origin) / self.voxel_size;
        [q.x.floor() as i64, q.y.floor() as i64, q.z.floor() as i64]
    }

    fn in_bounds(&self, i: [i64; 3]) -> bool {
        (0..3).all(|a| i[a] >= 0 && i[a] < self.extent[a])
    }

    fn storage(&self, i: [i64; 3]) -> [i64; 3] {
        [i[0] - self.shift[0], i[1] - self.shift[1], i[2] - self.shift[2]]
    }

    /// `(sdf, weight)` of a voxel; untouched voxels read as `(0, 0)`.
    pub fn voxel(&self, i: [i64; 3]) -> (f64, f64) {
        let (b, l) = split(self.storage(i));
        self.bricks.get(&b).map_or((0.0, 0.0), |br| (br.sdf[l], br.weight[l]))
    }

    pub fn is_empty(&self) -> bool {
        self.bricks.is_empty()
    }

    /// All voxels with non-zero weight, sorted by index `(z, y, x)`.
    pub fn weighted_voxels(&self) -> Vec<([i64; 3], f64, f64)> {
        let mut out = Vec::new();
        for (k, br) in &self.bricks {
            for l in 0..BRICK_VOXELS {
                if br.weight[l] > 0.0 {
                    let li = l as i64;
                    let s = [k[0] * BRICK + li % BRICK, k[1] * BRICK + (li / BRICK) % BRICK, k[2] * BRICK + li / (BRICK * BRICK)];
                    let i = [s[0] + self.shift[0], s[1] + self.shift[1], s[2] + self.shift[2]];
                    out.push((i, br.sdf[l], br.weight[l]));
                }
            }
        }
        out.sort_unstable_by_key(|e| [e.0[2], e.0[1], e.0[0]]);
        out
    }

    /// Extends the bounds to cover indices `lo..=hi` (current indexing) and
    /// returns the offset to add to those indices afterwards.
    fn grow_to(&mut self, lo: [i64; 3], hi: [i64; 3]) -> [i64; 3] {
        let mut delta = [0; 3];
        for a in 0..3 {
            if lo[a] < 0 {
                delta[a] = -lo[a];
                self.origin[a] -= delta[a] as f64 * self.voxel_size;
                self.shift[a] += delta[a];
                self.extent[a] += delta[a];
            }
            self.extent[a] = self.extent[a].max(hi[a] + delta[a] + 1);
        }
        delta
    }

    /// Fuses one depth map: every voxel whose projective distance to the
    /// observed surface is within the truncation band is averaged in with
    /// unit weight.
    pub fn integrate_depth(&mut self, depth: &DepthMap) -> Result<IntegrationStats, FusionError> {
        let mut candidates = self.band_voxels(depth);
        if candidates.is_empty() {
            return Err(FusionError::OutOfVolume);
        }
        if self.auto_grow {
            let mut lo = [i64::MAX; 3];
            let mut hi = [i64::MIN; 3];
            for c in &candidates {
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a]);
                }
            }
            let delta = self.grow_to(lo, hi);
            for c in &mut candidates {
                for a in 0..3 {
                    c[a] += delta[a];
                }
            }
        }
        let mut stats = IntegrationStats::default();
        let mut inside = Vec::with_capacity(candidates.len());
        for i in candidates {
            if self.in_bounds(i) {
                inside.push(i);
            } else {
                stats.clipped_voxels += 1;
            }
        }
        if inside.is_empty() {
            return Err(FusionError::OutOfVolume);
        }
        for i in inside {
            let p = self.voxel_center(i);
            let pc = depth.pose.transform(&p);
            if !(pc.z > 0.0) {
                continue;
            }
            let Some(d) = sample_depth(depth, pc.x / pc.z * depth.intrinsics.fx + depth.intrinsics.cx, pc.y / pc.z * depth.intrinsics.fy + depth.intrinsics.cy) else {
                continue;
            };
            let sdf = d - pc.z;
            if sdf.abs() > self.truncation {
                continue;
            }
            let sdf = sdf.clamp(-self.truncation, self.truncation);
            let (b, l) = split(self.storage(i));
            let br = self.bricks.entry(b).or_insert_with(Brick::empty);
            let w = br.weight[l];
            if w == 0.0 {
                stats.new_voxels += 1;
            }
            // same as (w·sdf + new)/(w + 1); exact when the new value repeats
            br.sdf[l] += (sdf - br.sdf[l]) / (w + 1.0);
            br.weight[l] = (w + 1.0).min(self.max_weight);
            stats.updated_voxels += 1;
        }
        Ok(stats)
    }

    /// Voxels touched by the truncation band around every valid pixel's
    /// surface point, sampled at half-voxel steps along the ray.
    fn band_voxels(&self, depth: &DepthMap) -> Vec<[i64; 3]> {
        let step = 0.5 * self.voxel_size;
        let n = (2.0 * self.truncation / step).ceil() as i64;
        let mut all: Vec<[i64; 3]> = (0..depth.height)
            .into_par_iter()
            .flat_map_iter(|v| {
                let mut row = Vec::new();
                for u in 0..depth.width {
                    let Some(d) = depth.get(u, v) else { continue };
                    let uv = Vector2::new(u as f64, v as f64);
                    for s in 0..=n {
                        let z = d - self.truncation + s as f64 * step;
                        if z > 0.0 {
                            row.push(self.voxel_of(&back_project(&depth.intrinsics, &depth.pose, &uv, z)));
                        }
                    }
                }
                row.sort_unstable();
                row.dedup();
                row
            })
            .collect();
        all.sort_unstable_by_key(|i| [i[2], i[1], i[0]]);
        all.dedup();
        all
    }
}

/// Bilinear depth when all four neighbors are valid, nearest otherwise.
fn sample_depth(depth: &DepthMap, u: f64, v: f64) -> Option<f64> {
    let (w, h) = (depth.width as f64, depth.height as f64);
    if !(u > -0.5 && v > -0.5 && u < w - 0.5 && v < h - 0.5) {
        return None;
    }
    let (u0, v0) = (u.floor(), v.floor());
    if u0 >= 0.0 && v0 >= 0.0 && u0 + 1.0 < w && v0 + 1.0 < h {
        let (a, b) = (u - u0, v - v0);
        let (iu, iv) = (u0 as u32, v0 as u32);
        if let (Some(d00), Some(d10), Some(d01), Some(d11)) =
            (depth.get(iu, iv), depth.get(iu + 1, iv), depth.get(iu, iv + 1), depth.get(iu + 1, iv + 1))
        {
            return Some((1.0 - b) * ((1.0 - a) * d00 + a * d10) + b * ((1.0 - a) * d01 + a * d11));
        }
    }
    depth.get(u.round() as u32, v.round() as u32)
}
