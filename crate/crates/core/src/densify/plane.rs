//! Robust global plane `depth = a·u + b·v + c` through the anchors, with idw
//! of the residuals on top.

use image::RgbImage;
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{anchor_sites, finish, idw_raster, Densifier, DensifyError, DepthMap};
use crate::anchor::AnchorMap;

pub struct PlaneFitDensifier {
    pub max_depth: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Densifier for PlaneFitDensifier {
    fn id(&self) -> &str {
        "plane_fit"
    }

    fn densify(&self, _image: Option<&RgbImage>, anchor: &AnchorMap) -> Result<DepthMap, DensifyError> {
        let (index, values) = anchor_sites(anchor)?;
        let pts: Vec<[f64; 3]> = (0..index.len()).map(|i| {
            let s = index.site(i);
            [s[0], s[1], values[i]]
        }).collect();
        let plane = fit_plane_lmeds(&pts, self.iterations, self.seed);
        let eval = |u: f64, v: f64| plane[0] * u + plane[1] * v + plane[2];
        let residuals: Vec<f64> = pts.iter().map(|p| p[2] - eval(p[0], p[1])).collect();
        let (mut raster, nearest) = idw_raster(&index, &residuals, anchor.width, anchor.height);
        let w = anchor.width as usize;
        for (i, z) in raster.iter_mut().enumerate() {
            *z += eval((i % w) as f64, (i / w) as f64);
        }
        // put the anchors back exactly; plane + residual can be off by an ulp
        for (i, p) in pts.iter().enumerate() {
            raster[p[1] as usize * w + p[0] as usize] = values[i];
        }
        Ok(finish(anchor, &index, raster, &nearest, self.max_depth, self.id()))
    }
}

/// Least-median-of-squares plane over random triples, refined by least
/// squares on the points within 2.5 robust sigmas. Returns `[a, b, c]`.
/// Fewer than three points, or an all-collinear set, yield a constant plane
/// at the median value.
pub fn fit_plane_lmeds(pts: &[[f64; 3]], iterations: usize, seed: u64) -> [f64; 3] {
    let n = pts.len();
    let mut zs: Vec<f64> = pts.iter().map(|p| p[2]).collect();
    let flat = [0.0, 0.0, median(&mut zs)];
    if n < 3 {
        return flat;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<([f64; 3], f64)> = None;
    let mut sq = vec![0.0; n];
    for _ in 0..iterations {
        let idx = rand::seq::index::sample(&mut rng, n, 3);
        let Some(plane) = plane_through([pts[idx.index(0)], pts[idx.index(1)], pts[idx.index(2)]]) else {
            continue;
        };
        for (s, p) in sq.iter_mut().zip(pts) {
            *s = (p[2] - plane[0] * p[0] - plane[1] * p[1] - plane[2]).powi(2);
        }
        let med = median(&mut sq);
        if best.is_none_or(|(_, m)| med < m) {
            best = Some((plane, med));
        }
    }
    let Some((plane, med)) = best else {
        return flat;
    };
    let sigma = 1.4826 * (1.0 + 5.0 / (n as f64 - 3.0).max(1.0)) * med.sqrt();
    let scale = zs.iter().fold(0.0f64, |a, z| a.max(z.abs()));
    let thr = (2.5 * sigma).max(1e-12 * scale);
    let inliers: Vec<&[f64; 3]> = pts.iter().filter(|p| (p[2] - plane[0] * p[0] - plane[1] * p[1] - plane[2]).abs() <= thr).collect();
    least_squares_plane(&inliers).unwrap_or(plane)
}

fn plane_through(p: [[f64; 3]; 3]) -> Option<[f64; 3]> {
    let a = Matrix3::new(p[0][0], p[0][1], 1.0, p[1][0], p[1][1], 1.0, p[2][0], p[2][1], 1.0);
    // collinear pixel triples have zero determinant (exact on integer pixels)
    if a.determinant().abs() < 1e-9 {
        return None;
    }
    let x = a.lu().solve(&Vector3::new(p[0][2], p[1][2], p[2][2]))?;
    Some([x[0], x[1], x[2]])
}

fn least_squares_plane(pts: &[&[f64; 3]]) -> Option<[f64; 3]> {
    if pts.len() < 3 {
        return None;
    }
    let m = pts.len() as f64;
    let (mu, mv) = (pts.iter().map(|p| p[0]).sum::<f64>() / m, pts.iter().map(|p| p[1]).sum::<f64>() / m);
    let a = DMatrix::from_fn(pts.len(), 3, |i, j| match j {
        0 => pts[i][0] - mu,
        1 => pts[i][1] - mv,
        _ => 1.0,
    });
    let b = DVector::from_iterator(pts.len(), pts.iter().map(|p| p[2]));
    let svd = a.svd(true, true);
    let s = &svd.singular_values;
    if s.min() <= 1e-9 * s.max() {
        return None;
    }
    let x = svd.solve(&b, 0.0).ok()?;
    Some([x[0], x[1], x[2] - x[0] * mu - x[1] * mv])
}

fn median(v: &mut [f64]) -> f64 {
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    let (_, &mut hi, _) = v.select_nth_unstable_by(n / 2, f64::total_cmp);
    if n % 2 == 1 {
        hi
    } else {
        let lo = v[..n / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}
