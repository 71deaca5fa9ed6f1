//! Essential-matrix RANSAC: normalized 8-point hypotheses, symmetric epipolar
//! distance scoring in pixels, consensus refinement and chirality-checked
//! decomposition into a relative pose.

use nalgebra::{DMatrix, Matrix3, Rotation3, Unit, Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::BaError;
use crate::geometry::{skew, CameraIntrinsics, Pose};

const MIN_CORRESPONDENCES: usize = 8;
const MIN_INLIER_RATIO: f64 = 0.3;
const CONFIDENCE: f64 = 0.999;
/// Near-planar ground admits a second, almost as consistent motion; a floor
/// on the sample count gives the true one a chance to be drawn.
const MIN_ITERATIONS: usize = 64;

/// Relative motion `X_b = R·X_a + t` with `|t| = 1`, plus the RANSAC consensus.
#[derive(Debug, Clone)]
pub struct EpipolarModel {
    pub essential: Matrix3<f64>,
    pub rotation: Rotation3<f64>,
    pub translation_dir: Unit<Vector3<f64>>,
    pub inliers: Vec<bool>,
    pub iterations: usize,
}

impl EpipolarModel {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }

    /// Pose of camera b given camera a's pose and a baseline length.
    pub fn chain(&self, pose_a: &Pose, baseline: f64) -> Pose {
        let rel = Pose::new(self.rotation, self.translation_dir.into_inner() * baseline);
        rel.compose(pose_a)
    }
}

fn normalized(k: &CameraIntrinsics, uv: &Vector2<f64>) -> Vector3<f64> {
    Vector3::new((uv.x - k.cx) / k.fx, (uv.y - k.cy) / k.fy, 1.0)
}

fn k_inv(k: &CameraIntrinsics) -> Matrix3<f64> {
    Matrix3::new(1.0 / k.fx, 0.0, -k.cx / k.fx, 0.0, 1.0 / k.fy, -k.cy / k.fy, 0.0, 0.0, 1.0)
}

/// Similarity moving the centroid to the origin with mean distance √2.
fn conditioning(pts: &[Vector3<f64>]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let c = pts.iter().fold(Vector2::zeros(), |a, p| a + p.xy()) / n;
    let mean_dist = pts.iter().map(|p| (p.xy() - c).norm()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 { std::f64::consts::SQRT_2 / mean_dist } else { 1.0 };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

/// Normalized 8-point estimate from normalized image coordinates, projected
/// onto the essential manifold.
fn eight_point(xa: &[Vector3<f64>], xb: &[Vector3<f64>]) -> Option<Matrix3<f64>> {
    let ta = conditioning(xa);
    let tb = conditioning(xb);
    let rows = xa.len().max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (pa, pb)) in xa.iter().zip(xb).enumerate() {
        let p = ta * pa;
        let q = tb * pb;
        for r in 0..3 {
            for c in 0..3 {
                a[(i, 3 * r + c)] = q[r] * p[c];
            }
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    let e = v_t.row(imin);
    let e_hat = Matrix3::from_row_slice(&[e[0], e[1], e[2], e[3], e[4], e[5], e[6], e[7], e[8]]);
    let e_full = tb.transpose() * e_hat * ta;
    let svd = e_full.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let e = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0)) * v_t;
    let n = e.norm();
    if !(n > 0.0) || !n.is_finite() {
        return None;
    }
    Some(e / n)
}

/// Symmetric epipolar distance in pixels, `sqrt((d_a² + d_b²) / 2)`.
fn epipolar_distance(f: &Matrix3<f64>, ua: &Vector2<f64>, ub: &Vector2<f64>) -> f64 {
    let pa = ua.push(1.0);
    let pb = ub.push(1.0);
    let lb = f * pa;
    let la = f.transpose() * pb;
    let num = pb.dot(&lb);
    let db2 = num * num / (lb.x * lb.x + lb.y * lb.y).max(1e-300);
    let da2 = num * num / (la.x * la.x + la.y * la.y).max(1e-300);
    ((da2 + db2) / 2.0).sqrt()
}

fn score(
    f: &Matrix3<f64>,
    corr: &[(Vector2<f64>, Vector2<f64>)],
    threshold: f64,
) -> (Vec<bool>, usize) {
    let mask: Vec<bool> = corr.iter().map(|(a, b)| epipolar_distance(f, a, b) < threshold).collect();
    let n = mask.iter().filter(|&&m| m).count();
    (mask, n)
}

/// Depth of a normalized correspondence in both cameras for motion (R, t).
fn depths(r: &Matrix3<f64>, t: &Vector3<f64>, xa: &Vector3<f64>, xb: &Vector3<f64>) -> Option<(f64, f64)> {
    // za·(R xa) + t = zb·xb  → least squares in (za, zb)
    let ra = r * xa;
    let m = nalgebra::Matrix3x2::from_columns(&[ra, -xb]);
    let mtm = m.transpose() * m;
    let sol = mtm.try_inverse()? * (m.transpose() * (-t));
    Some((sol[0], sol[1]))
}

fn decompose(
    e: &Matrix3<f64>,
    xa: &[Vector3<f64>],
    xb: &[Vector3<f64>],
) -> Option<(Rotation3<f64>, Vector3<f64>)> {
    let svd = e.svd(true, true);
    let mut u = svd.u?;
    let mut v_t = svd.v_t?;
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let t = u.column(2).into_owned();
    let mut best: Option<(usize, Matrix3<f64>, Vector3<f64>)> = None;
    for r in [u * w * v_t, u * w.transpose() * v_t] {
        for tt in [t, -t] {
            let front = xa
                .iter()
                .zip(xb)
                .filter(|(a, b)| matches!(depths(&r, &tt, a, b), Some((za, zb)) if za > 0.0 && zb > 0.0))
                .count();
            if best.as_ref().is_none_or(|b| front > b.0) {
                best = Some((front, r, tt));
            }
        }
    }
    let (_, r, t) = best?;
    Some((Rotation3::from_matrix(&r), t.normalize()))
}

fn essential_from(r: &Rotation3<f64>, t: &Vector3<f64>) -> Matrix3<f64> {
    skew(t) * r.matrix()
}

/// Levenberg-Marquardt on the five motion parameters (rotation increment plus
/// a tangent step of the unit translation), minimizing the pixel epipolar
/// distance over the flagged correspondences.
fn refine_motion(
    rotation: Rotation3<f64>,
    t: Vector3<f64>,
    corr: &[(Vector2<f64>, Vector2<f64>)],
    mask: &[bool],
    to_f: &dyn Fn(&Matrix3<f64>) -> Matrix3<f64>,
) -> (Rotation3<f64>, Vector3<f64>) {
    let used: Vec<_> = corr.iter().zip(mask).filter(|(_, &m)| m).map(|(c, _)| *c).collect();
    if used.len() < MIN_CORRESPONDENCES {
        return (rotation, t);
    }
    let apply = |r: &Rotation3<f64>, t: &Vector3<f64>, d: &[f64]| {
        let r2 = Rotation3::new(Vector3::new(d[0], d[1], d[2])) * r;
        // tangent basis of the unit sphere at t
        let helper = if t.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let b1 = t.cross(&helper).normalize();
        let b2 = t.cross(&b1);
        (r2, (t + b1 * d[3] + b2 * d[4]).normalize())
    };
    let residuals = |r: &Rotation3<f64>, t: &Vector3<f64>| -> Vec<f64> {
        let f = to_f(&essential_from(r, t));
        used.iter().map(|(a, b)| epipolar_distance(&f, a, b)).collect()
    };
    let cost = |res: &[f64]| res.iter().map(|x| x * x).sum::<f64>();
    let (mut r, mut t) = (rotation, t.normalize());
    let mut res = residuals(&r, &t);
    let mut c = cost(&res);
    let mut lambda = 1e-3;
    const H: f64 = 1e-7;
    for _ in 0..15 {
        let mut j = DMatrix::<f64>::zeros(res.len(), 5);
        for k in 0..5 {
            let mut d = [0.0; 5];
            d[k] = H;
            let (rp, tp) = apply(&r, &t, &d);
            d[k] = -H;
            let (rm, tm) = apply(&r, &t, &d);
            for (i, (p, m)) in residuals(&rp, &tp).iter().zip(residuals(&rm, &tm)).enumerate() {
                j[(i, k)] = (p - m) / (2.0 * H);
            }
        }
        let jtj = j.transpose() * &j;
        let g = j.transpose() * nalgebra::DVector::from_column_slice(&res);
        let mut improved = false;
        for _ in 0..8 {
            let mut a = jtj.clone();
            for k in 0..5 {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|ch| ch.solve(&(-&g))) else {
                lambda *= 10.0;
                continue;
            };
            let (r2, t2) = apply(&r, &t, step.as_slice());
            let res2 = residuals(&r2, &t2);
            let c2 = cost(&res2);
            if c2 < c {
                let rel = (c - c2) / c.max(1e-300);
                (r, t, res, c) = (r2, t2, res2, c2);
                lambda = (lambda * 0.3).max(1e-12);
                improved = rel > 1e-6;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (r, t)
}

/// Direct linear homography `x_b ~ H·x_a` from four or more normalized points.
fn homography_dlt(xa: &[Vector3<f64>], xb: &[Vector3<f64>]) -> Option<Matrix3<f64>> {
    let ta = conditioning(xa);
    let tb = conditioning(xb);
    let rows = (2 * xa.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (pa, pb)) in xa.iter().zip(xb).enumerate() {
        let (p, q) = (ta * pa, tb * pb);
        let (x, y, w) = (q.x / q.z, q.y / q.z, 1.0);
        for (r, (c0, c1, c2)) in [(2 * i, (0.0, -w, y)), (2 * i + 1, (w, 0.0, -x))] {
            for k in 0..3 {
                a[(r, k)] = c0 * p[k];
                a[(r, 3 + k)] = c1 * p[k];
                a[(r, 6 + k)] = c2 * p[k];
            }
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let (j, _) = svd.singular_values.iter().enumerate().min_by(|x, y| x.1.total_cmp(y.1))?;
    let h = v_t.row(j);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let h = tb.try_inverse()? * hn * ta;
    h.iter().all(|x| x.is_finite()).then_some(h)
}

/// Transfer error of `x_b` against `H·x_a`, in normalized image units.
fn transfer_error(h: &Matrix3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let p = h * a;
    if p.z.abs() < 1e-12 {
        return f64::INFINITY;
    }
    ((p.x / p.z - b.x).powi(2) + (p.y / p.z - b.y).powi(2)).sqrt()
}

/// The two physically distinct motions `(R, t)` of a plane-induced homography
/// (the sign of `t` is left to the caller).
fn homography_motions(h: &Matrix3<f64>, xa: &[Vector3<f64>], xb: &[Vector3<f64>]) -> Vec<(Rotation3<f64>, Vector3<f64>)> {
    let sv = h.singular_values();
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if !(sorted[1] > 1e-12) {
        return Vec::new();
    }
    let mut h = h / sorted[1];
    let positive = xa.iter().zip(xb).filter(|(a, b)| b.dot(&(h * *a)) > 0.0).count();
    if 2 * positive < xa.len() {
        h = -h;
    }
    let eig = (h.transpose() * h).symmetric_eigen();
    let mut order = [0, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let (s1, s3) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[2]]);
    let (v1, v2, v3) = (
        eig.eigenvectors.column(order[0]).into_owned(),
        eig.eigenvectors.column(order[1]).into_owned(),
        eig.eigenvectors.column(order[2]).into_owned(),
    );
    if s1 - s3 < 1e-12 {
        // no translation: rotation only, direction unobservable
        return Vec::new();
    }
    let (a, b, c) = ((1.0 - s3).max(0.0).sqrt(), (s1 - 1.0).max(0.0).sqrt(), (s1 - s3).sqrt());
    let mut out = Vec::new();
    for u in [(v1 * a + v3 * b) / c, (v1 * a - v3 * b) / c] {
        let uu = Matrix3::from_columns(&[v2, u, v2.cross(&u)]);
        let (hv, hu) = (h * v2, h * u);
        let ww = Matrix3::from_columns(&[hv, hu, hv.cross(&hu)]);
        let r = ww * uu.transpose();
        let n = v2.cross(&u);
        let t = (h - r) * n;
        if t.norm() > 1e-12 && (r.determinant() - 1.0).abs() < 1e-6 {
            out.push((Rotation3::from_matrix(&r), t.normalize()));
        }
    }
    out
}

/// Dominant-plane homography by four-point RANSAC, refit on its consensus.
fn dominant_plane(
    xa: &[Vector3<f64>],
    xb: &[Vector3<f64>],
    tol: f64,
    rng: &mut ChaCha8Rng,
) -> Option<(Matrix3<f64>, Vec<bool>)> {
    const SAMPLES: usize = 200;
    let n = xa.len();
    let consensus = |h: &Matrix3<f64>| -> Vec<bool> { xa.iter().zip(xb).map(|(a, b)| transfer_error(h, a, b) < tol).collect() };
    let mut best: Option<(usize, Matrix3<f64>)> = None;
    for _ in 0..SAMPLES {
        let idx = sample(rng, n, 4);
        let sa: Vec<_> = idx.iter().map(|i| xa[i]).collect();
        let sb: Vec<_> = idx.iter().map(|i| xb[i]).collect();
        let Some(h) = homography_dlt(&sa, &sb) else { continue };
        let count = consensus(&h).iter().filter(|&&m| m).count();
        if best.as_ref().is_none_or(|b| count > b.0) {
            best = Some((count, h));
        }
    }
    let (count, h) = best?;
    if count < MIN_CORRESPONDENCES {
        return None;
    }
    let mask = consensus(&h);
    let sa: Vec<_> = xa.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
    let sb: Vec<_> = xb.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
    let h = homography_dlt(&sa, &sb).unwrap_or(h);
    let mask = consensus(&h);
    Some((h, mask))
}

fn adaptive_iterations(inlier_ratio: f64, cap: usize) -> usize {
    let w8 = inlier_ratio.powi(MIN_CORRESPONDENCES as i32);
    if w8 >= 1.0 - 1e-12 {
        return 1;
    }
    if w8 <= 0.0 {
        return cap;
    }
    let n = (1.0 - CONFIDENCE).ln() / (-w8).ln_1p();
    (n.ceil() as usize).clamp(1, cap)
}

/// Robustly estimates the essential matrix between two views and flags the
/// correspondences whose symmetric epipolar distance is below `threshold_px`.
pub fn ransac_epipolar_filter(
    correspondences: &[(Vector2<f64>, Vector2<f64>)],
    k_a: &CameraIntrinsics,
    k_b: &CameraIntrinsics,
    threshold_px: f64,
    max_iters: usize,
    seed: u64,
) -> Result<EpipolarModel, BaError> {
    let n = correspondences.len();
    if n < MIN_CORRESPONDENCES {
        return Err(BaError::TooFewCorrespondences(n));
    }
    let xa: Vec<_> = correspondences.iter().map(|(a, _)| normalized(k_a, a)).collect();
    let xb: Vec<_> = correspondences.iter().map(|(_, b)| normalized(k_b, b)).collect();
    let (kai, kbi) = (k_inv(k_a), k_inv(k_b));
    let to_f = |e: &Matrix3<f64>| kbi.transpose() * e * kai;

    // the linear estimate is weak on near-planar ground; polish on the manifold
    let refine = |mut rotation: Rotation3<f64>, mut t: Vector3<f64>, mut count: usize, mut e: Matrix3<f64>, mut mask: Vec<bool>| {
        for _ in 0..4 {
            let (wide, _) = score(&to_f(&essential_from(&rotation, &t)), correspondences, 2.0 * threshold_px);
            let (r2, t2) = refine_motion(rotation, t, correspondences, &wide, &to_f);
            let e2 = essential_from(&r2, &t2);
            let (mask2, count2) = score(&to_f(&e2), correspondences, threshold_px);
            if count2 < count {
                break;
            }
            let changed = mask2 != mask;
            (rotation, t, count, e, mask) = (r2, t2, count2, e2, mask2);
            if !changed {
                break;
            }
        }
        Polished { count, essential: e, mask, rotation, t }
    };

    let polish = |e: Matrix3<f64>| -> Option<Polished> {
        let (mut mask, mut count) = score(&to_f(&e), correspondences, threshold_px);
        let mut e = e;
        // linear re-estimate on the consensus set while it keeps growing
        for _ in 0..5 {
            if count < MIN_CORRESPONDENCES {
                return None;
            }
            let sa: Vec<_> = xa.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
            let sb: Vec<_> = xb.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
            let Some(e2) = eight_point(&sa, &sb) else { break };
            let (mask2, count2) = score(&to_f(&e2), correspondences, threshold_px);
            if count2 <= count {
                break;
            }
            (count, e, mask) = (count2, e2, mask2);
        }
        if count < MIN_CORRESPONDENCES {
            return None;
        }
        let ia: Vec<_> = xa.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
        let ib: Vec<_> = xb.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
        let (rotation, t) = decompose(&e, &ia, &ib)?;
        Some(refine(rotation, t, count, e, mask))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Polished> = None;
    let mut best_raw = 0;
    let mut needed = max_iters.max(1);
    let mut iters = 0;
    while iters < needed {
        iters += 1;
        let idx = sample(&mut rng, n, MIN_CORRESPONDENCES);
        let sa: Vec<_> = idx.iter().map(|i| xa[i]).collect();
        let sb: Vec<_> = idx.iter().map(|i| xb[i]).collect();
        let Some(e) = eight_point(&sa, &sb) else { continue };
        let (_, raw) = score(&to_f(&e), correspondences, threshold_px);
        // local optimization of every promising sample; keep the best polished model
        if raw < MIN_CORRESPONDENCES || 2 * raw < best_raw {
            continue;
        }
        best_raw = best_raw.max(raw);
        let Some(p) = polish(e) else { continue };
        if best.as_ref().is_none_or(|b| p.count > b.count) {
            needed = adaptive_iterations(p.count as f64 / n as f64, max_iters.max(1)).max(MIN_ITERATIONS.min(max_iters));
            best = Some(p);
        }
    }
    // on near-planar ground the sampled models can settle on the planar dual
    // motion; both motions of the dominant-plane homography seed a polish too
    if let Some((h, plane)) = dominant_plane(&xa, &xb, 4.0 * threshold_px / k_b.fx, &mut rng) {
        let pa: Vec<_> = xa.iter().zip(&plane).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
        let pb: Vec<_> = xb.iter().zip(&plane).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
        for (rotation, t) in homography_motions(&h, &pa, &pb) {
            let e = essential_from(&rotation, &t);
            let (mask, count) = score(&to_f(&e), correspondences, threshold_px);
            if count < MIN_CORRESPONDENCES {
                continue;
            }
            let mut p = refine(rotation, t, count, e, mask);
            // settle the sign of t by chirality
            let ia: Vec<_> = xa.iter().zip(&p.mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
            let ib: Vec<_> = xb.iter().zip(&p.mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
            let Some((r, t)) = decompose(&p.essential, &ia, &ib) else { continue };
            (p.rotation, p.t) = (r, t);
            if best.as_ref().is_none_or(|b| p.count > b.count) {
                best = Some(p);
            }
        }
    }
    let best = best.ok_or(BaError::NoConsensus(0.0))?;
    let ratio = best.count as f64 / n as f64;
    if ratio < MIN_INLIER_RATIO {
        return Err(BaError::NoConsensus(ratio));
    }
    Ok(EpipolarModel {
        essential: best.essential,
        rotation: best.rotation,
        translation_dir: Unit::new_normalize(best.t),
        inliers: best.mask,
        iterations: iters,
    })
}

struct Polished {
    count: usize,
    essential: Matrix3<f64>,
    mask: Vec<bool>,
    rotation: Rotation3<f64>,
    t: Vector3<f64>,
}
