//! Analytic terrain, markers and surface features.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Steepest admissible terrain slope, `tan 30°`.
pub const MAX_SLOPE: f64 = 0.577_350_269_189_625_8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bump {
    pub center: Vector2<f64>,
    pub amplitude: f64,
    pub sigma: f64,
}

/// `z(x, y) = base + Σ a·exp(−|p − c|² / 2σ²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Terrain {
    pub base: f64,
    pub bumps: Vec<Bump>,
}

impl Terrain {
    pub fn flat(base: f64) -> Self {
        Self { base, bumps: Vec::new() }
    }

    pub fn height(&self, x: f64, y: f64) -> f64 {
        let p = Vector2::new(x, y);
        self.base
            + self
                .bumps
                .iter()
                .map(|b| b.amplitude * (-(p - b.center).norm_squared() / (2.0 * b.sigma * b.sigma)).exp())
                .sum::<f64>()
    }

    pub fn gradient(&self, x: f64, y: f64) -> Vector2<f64> {
        let p = Vector2::new(x, y);
        self.bumps.iter().fold(Vector2::zeros(), |g, b| {
            let d = p - b.center;
            let e = b.amplitude * (-d.norm_squared() / (2.0 * b.sigma * b.sigma)).exp();
            g - d * (e / (b.sigma * b.sigma))
        })
    }

    /// Lower and upper bounds on the elevation.
    pub fn elevation_bounds(&self) -> (f64, f64) {
        let lo: f64 = self.bumps.iter().map(|b| b.amplitude.min(0.0)).sum();
        let hi: f64 = self.bumps.iter().map(|b| b.amplitude.max(0.0)).sum();
        (self.base + lo, self.base + hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    /// Region holding bumps and features: `[min_x, min_y, max_x, max_y]`.
    pub bounds: [f64; 4],
    /// Random bumps (at most 13); three more shape the marker relief.
    pub bumps: usize,
    pub max_amplitude: f64,
    /// Mean spacing of the jittered feature lattice (meters).
    pub feature_spacing: f64,
    /// Marker A sits on the terrain here; B and C are placed from it and
    /// raised to `marker_z_separation` above A.
    pub marker_anchor: [f64; 2],
    pub marker_xy_separation: f64,
    pub marker_z_separation: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            bounds: [-30.0, -45.0, 30.0, 335.0],
            bumps: 12,
            max_amplitude: 6.0,
            feature_spacing: 1.0,
            marker_anchor: [0.0, 130.0],
            marker_xy_separation: 40.0,
            marker_z_separation: 26.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Marker {
    pub id: String,
    pub position: Vector3<f64>,
    /// Height of the marker above the terrain under it. Masts are not part
    /// of the heightfield.
    pub mast_height: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkerPairTruth {
    pub a: usize,
    pub b: usize,
    pub xy_separation: f64,
    pub z_separation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub terrain: Terrain,
    pub markers: Vec<Marker>,
    pub marker_pairs: Vec<MarkerPairTruth>,
    pub feature_points: Vec<Vector3<f64>>,
}

impl SyntheticScene {
    /// Draws random bumps, adds the marker relief (a valley under A, hills
    /// under B and C), then places one feature per lattice cell at a uniform
    /// position inside the cell, lifted onto the terrain.
    pub fn generate(seed: u64, config: &SceneConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [x0, y0, x1, y1] = config.bounds;
        let mut bumps = Vec::new();
        for _ in 0..config.bumps.min(13) {
            let center = Vector2::new(rng.random_range(x0..x1), rng.random_range(y0..y1));
            let amplitude = rng.random_range(-config.max_amplitude..=config.max_amplitude);
            let sigma = rng.random_range(12.0..35.0);
            bumps.push(Bump { center, amplitude, sigma });
        }
        let sites = marker_sites(config);
        let marker_bumps: Vec<Bump> = sites
            .iter()
            .enumerate()
            .map(|(i, c)| Bump {
                center: *c,
                amplitude: if i == 0 { -MARKER_RELIEF } else { MARKER_RELIEF },
                sigma: MARKER_RELIEF_SIGMA,
            })
            .collect();
        let mut terrain = Terrain { base: 0.0, bumps: marker_bumps.clone() };
        terrain.bumps.extend(bumps);
        // shrink the random bumps until the sampled slope is under 30° with margin
        for _ in 0..40 {
            if sampled_max_slope(&terrain, config.bounds) < 0.9 * MAX_SLOPE {
                break;
            }
            for b in terrain.bumps.iter_mut().skip(marker_bumps.len()) {
                b.amplitude *= 0.8;
            }
        }
        let step = config.feature_spacing;
        let (nx, ny) = (((x1 - x0) / step).floor() as usize, ((y1 - y0) / step).floor() as usize);
        let mut feature_points = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let x = x0 + (i as f64 + rng.random_range(0.0..1.0)) * step;
                let y = y0 + (j as f64 + rng.random_range(0.0..1.0)) * step;
                feature_points.push(Vector3::new(x, y, terrain.height(x, y)));
            }
        }
        // A stands on the valley floor; B and C top masts on the hills
        let za = terrain.height(sites[0].x, sites[0].y);
        let markers: Vec<Marker> = ["A", "B", "C"]
            .iter()
            .zip(&sites)
            .enumerate()
            .map(|(i, (id, c))| {
                let ground = terrain.height(c.x, c.y);
                let z = if i == 0 { za } else { (za + config.marker_z_separation).max(ground) };
                Marker { id: id.to_string(), position: Vector3::new(c.x, c.y, z), mast_height: z - ground }
            })
            .collect();
        let pair = |i: usize, j: usize| {
            let (p, q) = (markers[i].position, markers[j].position);
            MarkerPairTruth { a: i, b: j, xy_separation: (q - p).xy().norm(), z_separation: (q.z - p.z).abs() }
        };
        let marker_pairs = vec![pair(0, 1), pair(0, 2)];
        Self { seed, terrain, markers, marker_pairs, feature_points }
    }
}

// Steepest slope of the relief alone is about 0.4, so A to B gains ~11.5 m of terrain.
const MARKER_RELIEF: f64 = 6.0;
const MARKER_RELIEF_SIGMA: f64 = 18.0;

/// A at the anchor; B ahead and C behind along the strip, each
/// `marker_xy_separation` from A with a small cross-track offset.
fn marker_sites(config: &SceneConfig) -> [Vector2<f64>; 3] {
    let [ax, ay] = config.marker_anchor;
    let d = config.marker_xy_separation;
    let off = 0.125 * d;
    let along = (d * d - off * off).sqrt();
    [Vector2::new(ax, ay), Vector2::new(ax + off, ay + along), Vector2::new(ax - off, ay - along)]
}

/// Largest gradient norm on a 0.5 m lattice over `bounds`.
pub fn sampled_max_slope(terrain: &Terrain, bounds: [f64; 4]) -> f64 {
    let [x0, y0, x1, y1] = bounds;
    let step = 0.5;
    let (nx, ny) = (((x1 - x0) / step) as usize, ((y1 - y0) / step) as usize);
    let mut m = 0.0f64;
    for j in 0..=ny {
        for i in 0..=nx {
            m = m.max(terrain.gradient(x0 + i as f64 * step, y0 + j as f64 * step).norm());
        }
    }
    m
}
