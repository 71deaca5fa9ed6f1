//! Depth fusion and the global products: point cloud, DSM and orthomosaic.

mod tsdf;

use image::{Rgb, RgbImage};
use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::densify::DepthMap;

pub use tsdf::{IntegrationStats, TsdfVolume, BRICK, DEFAULT_MAX_WEIGHT};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FusionError {
    #[error("depth frustum lies entirely outside the volume")]
    OutOfVolume,
    #[error("volume holds no weighted voxels")]
    EmptyVolume,
    #[error("point cloud is empty")]
    EmptyPointCloud,
    #[error("no frame carries an image")]
    NoImagery,
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("invalid raster: {0}")]
    InvalidRaster(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    /// Per-point color, parallel to `points` when present.
    pub colors: Option<Vec<[u8; 3]>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One point per sign change of the sdf between axis neighbors that both
/// carry weight, at the linear zero crossing. A voxel whose sdf is exactly
/// zero contributes its own centre once.
pub fn extract_point_cloud(volume: &TsdfVolume) -> Result<PointCloud, FusionError> {
    let voxels = volume.weighted_voxels();
    if voxels.is_empty() {
        return Err(FusionError::EmptyVolume);
    }
    let mut points = Vec::new();
    for (i, s0, _) in voxels {
        let p0 = volume.voxel_center(i);
        if s0 == 0.0 {
            points.push(p0);
            continue;
        }
        for axis in 0..3 {
            let mut j = i;
            j[axis] += 1;
            let (s1, w1) = volume.voxel(j);
            if w1 > 0.0 && ((s0 > 0.0 && s1 < 0.0) || (s0 < 0.0 && s1 > 0.0)) {
                let t = s0 / (s0 - s1);
                let mut p = p0;
                p[axis] += t * volume.voxel_size;
                points.push(p);
            }
        }
    }
    Ok(PointCloud { points, colors: None })
}

/// North-up elevation raster. `origin` is the outer corner of cell (0, 0)
/// at minimum x and maximum y; rows grow southwards, columns eastwards.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightRaster {
    pub rows: usize,
    pub cols: usize,
    pub cell_size: f64,
    pub origin: Vector2<f64>,
    /// Row-major elevations, NaN for empty cells.
    pub data: Vec<f64>,
}

impl HeightRaster {
    pub fn new(rows: usize, cols: usize, cell_size: f64, origin: Vector2<f64>) -> Result<Self, FusionError> {
        if rows == 0 || cols == 0 || !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(FusionError::InvalidRaster(format!("{rows}x{cols} cells of {cell_size} m")));
        }
        Ok(Self { rows, cols, cell_size, origin, data: vec![f64::NAN; rows * cols] })
    }

    pub fn get(&self, r: usize, c: usize) -> Option<f64> {
        let h = self.data[r * self.cols + c];
        (!h.is_nan()).then_some(h)
    }

    pub fn cell_center(&self, r: usize, c: usize) -> Vector2<f64> {
        Vector2::new(self.origin.x + (c as f64 + 0.5) * self.cell_size, self.origin.y - (r as f64 + 0.5) * self.cell_size)
    }

    /// Cell containing `(x, y)`, if inside the raster.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x - self.origin.x) / self.cell_size).floor();
        let r = ((self.origin.y - y) / self.cell_size).floor();
        (c >= 0.0 && r >= 0.0 && (c as usize) < self.cols && (r as usize) < self.rows).then(|| (r as usize, c as usize))
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|h| !h.is_nan()).count()
    }

    /// Row-major cells, `None` when empty.
    pub fn values(&self) -> impl Iterator<Item = Option<f64>> + '_ {
        self.data.iter().map(|&h| (!h.is_nan()).then_some(h))
    }
}

/// Per-cell maximum elevation over a grid spanning the XY bounding box of
/// the points, padded by half a cell on every side.
pub fn rasterize_dsm(points: &[Vector3<f64>], cell_size: f64) -> Result<HeightRaster, FusionError> {
    if points.is_empty() {
        return Err(FusionError::EmptyPointCloud);
    }
    if !(cell_size > 0.0 && cell_size.is_finite()) {
        return Err(FusionError::InvalidRaster(format!("cell size {cell_size}")));
    }
    let (mut lo, mut hi) = (Vector2::repeat(f64::INFINITY), Vector2::repeat(f64::NEG_INFINITY));
    for p in points {
        lo = lo.inf(&p.xy());
        hi = hi.sup(&p.xy());
    }
    let cols = ((hi.x - lo.x + cell_size) / cell_size).ceil().max(1.0) as usize;
    let rows = ((hi.y - lo.y + cell_size) / cell_size).ceil().max(1.0) as usize;
    let origin = Vector2::new(lo.x - 0.5 * cell_size, hi.y + 0.5 * cell_size);
    let mut raster = HeightRaster::new(rows, cols, cell_size, origin)?;
    for p in points {
        let c = (((p.x - origin.x) / cell_size).floor().max(0.0) as usize).min(cols - 1);
        let r = (((origin.y - p.y) / cell_size).floor().max(0.0) as usize).min(rows - 1);
        let h = &mut raster.data[r * cols + c];
        if h.is_nan() || p.z > *h {
            *h = p.z;
        }
    }
    Ok(raster)
}

/// Image and depth of one densified frame, as seen by the orthomosaic.
pub struct OrthoView<'a> {
    pub image: Option<&'a RgbImage>,
    pub depth: &'a DepthMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Orthomosaic {
    /// `cols × rows`, aligned with the DSM grid.
    pub image: RgbImage,
    /// Index into the views for every cell that received a color.
    pub source: Vec<Option<usize>>,
}

/// Colors every DSM cell from the most nadir view that sees its surface
/// point: the projection lands inside the image and the view's own depth
/// agrees with the point's camera depth to within `occlusion_tol` meters.
pub fn orthomosaic(views: &[OrthoView], dsm: &HeightRaster, occlusion_tol: f64) -> Result<Orthomosaic, FusionError> {
    if views.iter().all(|v| v.image.is_none()) {
        return Err(FusionError::NoImagery);
    }
    let mut image = RgbImage::new(dsm.cols as u32, dsm.rows as u32);
    let mut source = vec![None; dsm.rows * dsm.cols];
    for r in 0..dsm.rows {
        for c in 0..dsm.cols {
            let Some(h) = dsm.get(r, c) else { continue };
            let xy = dsm.cell_center(r, c);
            let p = Vector3::new(xy.x, xy.y, h);
            let mut best: Option<(f64, usize, Rgb<u8>)> = None;
            for (vi, view) in views.iter().enumerate() {
                let Some(img) = view.image else { continue };
                let Some(color) = observe(view.depth, img, &p, occlusion_tol) else { continue };
                let ray = p - view.depth.pose.center();
                let nadir = ray.z.abs() / ray.norm();
                if best.is_none_or(|(b, _, _)| nadir > b) {
                    best = Some((nadir, vi, color));
                }
            }
            if let Some((_, vi, color)) = best {
                image.put_pixel(c as u32, r as u32, color);
                source[r * dsm.cols + c] = Some(vi);
            }
        }
    }
    Ok(Orthomosaic { image, source })
}

fn observe(depth: &DepthMap, img: &RgbImage, p: &Vector3<f64>, tol: f64) -> Option<Rgb<u8>> {
    let pc = depth.pose.transform(p);
    if !(pc.z > 0.0) {
        return None;
    }
    let k = &depth.intrinsics;
    let (u, v) = ((k.fx * pc.x / pc.z + k.cx).round(), (k.fy * pc.y / pc.z + k.cy).round());
    if !k.contains(u, v) {
        return None;
    }
    let d = depth.get(u as u32, v as u32)?;
    if (d - pc.z).abs() > tol {
        return None;
    }
    // imagery may be stored at a different resolution than the intrinsics
    let iu = ((u + 0.5) * img.width() as f64 / k.width as f64).floor() as u32;
    let iv = ((v + 0.5) * img.height() as f64 / k.height as f64).floor() as u32;
    Some(*img.get_pixel(iu.min(img.width() - 1), iv.min(img.height() - 1)))
}
