use nalgebra::{Vector2, Vector3};

use super::{CameraIntrinsics, Frame, GeometryError, Pose};

/// Simple planar polygon on the ground plane, stored counter-clockwise.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundPolygon {
    vertices: Vec<Vector2<f64>>,
}

fn signed_area(v: &[Vector2<f64>]) -> f64 {
    let n = v.len();
    let mut s = 0.0;
    for i in 0..n {
        let a = v[i];
        let b = v[(i + 1) % n];
        s += a.x * b.y - b.x * a.y;
    }
    0.5 * s
}

fn cross(o: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn segments_cross(p1: &Vector2<f64>, p2: &Vector2<f64>, q1: &Vector2<f64>, q2: &Vector2<f64>) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    (d1 > 0.0) != (d2 > 0.0) && (d3 > 0.0) != (d4 > 0.0) && d1 != 0.0 && d2 != 0.0 && d3 != 0.0 && d4 != 0.0
}

impl GroundPolygon {
    pub fn new(mut vertices: Vec<Vector2<f64>>) -> Result<Self, GeometryError> {
        if vertices.len() < 3 {
            return Err(GeometryError::InvalidPolygon("fewer than 3 vertices".into()));
        }
        let n = vertices.len();
        for i in 0..n {
            for j in i + 1..n {
                // adjacent edges share a vertex; skip them
                if j == i + 1 || (i == 0 && j == n - 1) {
                    continue;
                }
                if segments_cross(&vertices[i], &vertices[(i + 1) % n], &vertices[j], &vertices[(j + 1) % n]) {
                    return Err(GeometryError::InvalidPolygon("self-intersecting".into()));
                }
            }
        }
        let area = signed_area(&vertices);
        if !(area.abs() > 0.0) {
            return Err(GeometryError::InvalidPolygon("zero area".into()));
        }
        if area < 0.0 {
            vertices.reverse();
        }
        Ok(Self { vertices })
    }

    pub fn vertices(&self) -> &[Vector2<f64>] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices)
    }

    pub fn is_convex(&self) -> bool {
        let n = self.vertices.len();
        (0..n).all(|i| {
            cross(&self.vertices[i], &self.vertices[(i + 1) % n], &self.vertices[(i + 2) % n]) >= 0.0
        })
    }

    pub fn translated(&self, d: Vector2<f64>) -> Self {
        Self { vertices: self.vertices.iter().map(|v| v + d).collect() }
    }

    /// Sutherland–Hodgman clip of `self` against the convex polygon `clip`.
    pub fn clip_convex(&self, clip: &GroundPolygon) -> Vec<Vector2<f64>> {
        let mut output = self.vertices.clone();
        let m = clip.vertices.len();
        for i in 0..m {
            if output.is_empty() {
                break;
            }
            let a = clip.vertices[i];
            let b = clip.vertices[(i + 1) % m];
            let input = std::mem::take(&mut output);
            let k = input.len();
            for j in 0..k {
                let cur = input[j];
                let prev = input[(j + k - 1) % k];
                let cur_in = cross(&a, &b, &cur) >= 0.0;
                let prev_in = cross(&a, &b, &prev) >= 0.0;
                if cur_in {
                    if !prev_in {
                        output.push(line_intersection(&prev, &cur, &a, &b));
                    }
                    output.push(cur);
                } else if prev_in {
                    output.push(line_intersection(&prev, &cur, &a, &b));
                }
            }
        }
        output
    }
}

fn line_intersection(p: &Vector2<f64>, q: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> Vector2<f64> {
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let t = dp / (dp - dq);
    p + (q - p) * t
}

/// Ground coverage of `frame` on the plane `z = ground_elevation`, using its GNSS pose.
pub fn footprint(frame: &Frame, ground_elevation: f64) -> Result<GroundPolygon, GeometryError> {
    let prior = frame.gnss_prior.as_ref().ok_or(GeometryError::MissingPrior(frame.id))?;
    footprint_at_pose(&frame.intrinsics, &prior.pose, ground_elevation)
}

/// Back-projects the four image corners through `pose` onto `z = ground_elevation`.
pub fn footprint_at_pose(
    k: &CameraIntrinsics,
    pose: &Pose,
    ground_elevation: f64,
) -> Result<GroundPolygon, GeometryError> {
    let c = pose.center();
    let w = k.width as f64;
    let h = k.height as f64;
    let r_inv = pose.rotation.inverse();
    let mut verts = Vec::with_capacity(4);
    for (u, v) in [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)] {
        let d = r_inv * Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        if d.z.abs() < 1e-12 {
            return Err(GeometryError::HorizonRay);
        }
        let s = (ground_elevation - c.z) / d.z;
        if !(s > 0.0) || !s.is_finite() {
            return Err(GeometryError::HorizonRay);
        }
        verts.push(Vector2::new(c.x + s * d.x, c.y + s * d.y));
    }
    GroundPolygon::new(verts)
}

/// `area(a ∩ b) / area(a)`, i.e. overlap measured relative to `a`.
/// `b` must be convex; pinhole footprints always are.
pub fn overlap_ratio(a: &GroundPolygon, b: &GroundPolygon) -> f64 {
    debug_assert!(b.is_convex());
    let inter = a.clip_convex(b);
    if inter.len() < 3 {
        return 0.0;
    }
    (signed_area(&inter).abs() / a.area()).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{FrameId, GnssPrior};
    use nalgebra::{Matrix3, Rotation3};

    fn square(x0: f64, y0: f64, s: f64) -> GroundPolygon {
        GroundPolygon::new(vec![
            Vector2::new(x0, y0),
            Vector2::new(x0 + s, y0),
            Vector2::new(x0 + s, y0 + s),
            Vector2::new(x0, y0 + s),
        ])
        .unwrap()
    }

    fn nadir_rot() -> Rotation3<f64> {
        Rotation3::from_matrix_unchecked(Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)))
    }

    fn frame_at(k: CameraIntrinsics, pose: Pose) -> Frame {
        Frame::new(FrameId(0), 0.0, k).with_prior(GnssPrior { pose, sigma_position: 0.05 })
    }

    #[test]
    fn self_overlap_is_one() {
        let a = square(0.0, 0.0, 1.0);
        assert!((overlap_ratio(&a, &a) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn half_shift_is_half() {
        let a = square(0.0, 0.0, 1.0);
        let b = square(0.5, 0.0, 1.0);
        assert!((overlap_ratio(&a, &b) - 0.5).abs() < 1e-15);
        assert_eq!(overlap_ratio(&a, &square(3.0, 0.0, 1.0)), 0.0);
    }

    #[test]
    fn overlap_is_relative_to_first_polygon() {
        let small = square(0.0, 0.0, 1.0);
        let big = square(0.0, 0.0, 2.0);
        assert!((overlap_ratio(&small, &big) - 1.0).abs() < 1e-15);
        assert!((overlap_ratio(&big, &small) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn rejects_bow_tie_and_degenerate() {
        let bow = vec![
            Vector2::new(0.0, 0.0),
            Vector2::new(1.0, 1.0),
            Vector2::new(1.0, 0.0),
            Vector2::new(0.0, 1.0),
        ];
        assert!(GroundPolygon::new(bow).is_err());
        let line = vec![Vector2::new(0.0, 0.0), Vector2::new(1.0, 0.0), Vector2::new(2.0, 0.0)];
        assert!(GroundPolygon::new(line).is_err());
    }

    #[test]
    fn nadir_footprint_is_similar_triangle_rectangle() {
        let f = 1000.0;
        let k = CameraIntrinsics { fx: f, fy: f, cx: 400.0, cy: 300.0, width: 800, height: 600 };
        let pose = Pose::from_center(nadir_rot(), Vector3::new(10.0, 20.0, 50.0));
        let poly = footprint(&frame_at(k, pose), 0.0).unwrap();
        let xs: Vec<f64> = poly.vertices().iter().map(|v| v.x).collect();
        let ys: Vec<f64> = poly.vertices().iter().map(|v| v.y).collect();
        let span = |v: &[f64]| v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
        assert!((span(&xs) - 800.0 * 50.0 / f).abs() < 1e-9);
        assert!((span(&ys) - 600.0 * 50.0 / f).abs() < 1e-9);
        let cx = xs.iter().sum::<f64>() / 4.0;
        let cy = ys.iter().sum::<f64>() / 4.0;
        assert!((cx - 10.0).abs() < 1e-9 && (cy - 20.0).abs() < 1e-9);
    }

    #[test]
    fn full_resolution_footprint_area() {
        // 8064×4536 px at 50 m with 0.85 cm/px ground sampling
        let f = 50.0 / 0.0085;
        let k = CameraIntrinsics { fx: f, fy: f, cx: 4032.0, cy: 2268.0, width: 8064, height: 4536 };
        let pose = Pose::from_center(nadir_rot(), Vector3::new(0.0, 0.0, 50.0));
        let area = footprint(&frame_at(k, pose), 0.0).unwrap().area();
        assert!((area - 2650.0).abs() / 2650.0 < 0.01, "area {area}");
    }

    #[test]
    fn horizon_and_missing_prior() {
        let k = CameraIntrinsics { fx: 500.0, fy: 500.0, cx: 320.0, cy: 240.0, width: 640, height: 480 };
        // optical axis horizontal (pitched 90° from nadir)
        let look_north = Rotation3::from_matrix_unchecked(Matrix3::new(
            1.0, 0.0, 0.0, //
            0.0, 0.0, -1.0, //
            0.0, 1.0, 0.0,
        ));
        let pose = Pose::from_center(look_north, Vector3::new(0.0, 0.0, 50.0));
        assert_eq!(footprint(&frame_at(k, pose), 0.0), Err(GeometryError::HorizonRay));
        let bare = Frame::new(FrameId(4), 0.0, k);
        assert_eq!(footprint(&bare, 0.0), Err(GeometryError::MissingPrior(FrameId(4))));
    }

    #[test]
    fn overlap_monotone_under_translation() {
        let a = square(0.0, 0.0, 2.0);
        for dir in [Vector2::new(1.0, 0.0), Vector2::new(0.3, 0.7).normalize(), Vector2::new(-1.0, -1.0).normalize()] {
            let mut last = 1.0 + 1e-12;
            for step in 0..60 {
                let b = a.translated(dir * (step as f64 * 0.05));
                let r = overlap_ratio(&a, &b);
                assert!(r <= last + 1e-12);
                last = r;
            }
        }
    }
}
