//! Inverse-distance weighting over anchor cells with a uniform bucket grid
//! for k-nearest queries.

use rayon::prelude::*;

pub const IDW_POWER: f64 = 2.0;
pub const IDW_NEIGHBORS: usize = 12;

/// Bucket grid over 2D sites. Sites are referenced by their input index, so
/// neighbor ties resolve to the lower index.
pub struct SiteIndex {
    sites: Vec<[f64; 2]>,
    cell: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<usize>>,
}

impl SiteIndex {
    /// `extent` is the `(width, height)` of the query domain, starting at 0.
    pub fn new(sites: Vec<[f64; 2]>, extent: (f64, f64)) -> Self {
        let n = sites.len().max(1) as f64;
        // about two sites per bucket on a uniform layout
        let cell = (extent.0 * extent.1 * 2.0 / n).sqrt().max(1.0);
        let nx = (extent.0 / cell).ceil().max(1.0) as usize;
        let ny = (extent.1 / cell).ceil().max(1.0) as usize;
        let mut buckets = vec![Vec::new(); nx * ny];
        for (i, s) in sites.iter().enumerate() {
            let (bx, by) = Self::bucket_of(s[0], s[1], cell, nx, ny);
            buckets[by * nx + bx].push(i);
        }
        Self { sites, cell, nx, ny, buckets }
    }

    fn bucket_of(x: f64, y: f64, cell: f64, nx: usize, ny: usize) -> (usize, usize) {
        let bx = ((x / cell).floor().max(0.0) as usize).min(nx - 1);
        let by = ((y / cell).floor().max(0.0) as usize).min(ny - 1);
        (bx, by)
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn site(&self, i: usize) -> [f64; 2] {
        self.sites[i]
    }

    /// The `k` nearest sites to `(x, y)` as `(squared distance, index)`,
    /// ascending. `skip` excludes one site (used for site-to-site spacing).
    pub fn knn(&self, x: f64, y: f64, k: usize, skip: Option<usize>, out: &mut Vec<(f64, usize)>) {
        out.clear();
        if k == 0 {
            return;
        }
        let (bx, by) = Self::bucket_of(x, y, self.cell, self.nx, self.ny);
        let max_ring = self.nx.max(self.ny);
        for r in 0..=max_ring {
            let (x0, x1) = (bx as isize - r as isize, bx as isize + r as isize);
            let (y0, y1) = (by as isize - r as isize, by as isize + r as isize);
            for cy in y0..=y1 {
                if cy < 0 || cy >= self.ny as isize {
                    continue;
                }
                let on_edge_row = cy == y0 || cy == y1;
                let mut cx = x0;
                while cx <= x1 {
                    if cx >= 0 && cx < self.nx as isize {
                        for &i in &self.buckets[cy as usize * self.nx + cx as usize] {
                            if Some(i) == skip {
                                continue;
                            }
                            let s = self.sites[i];
                            let d2 = (s[0] - x).powi(2) + (s[1] - y).powi(2);
                            insert_sorted(out, k, (d2, i));
                        }
                    }
                    // interior rows only touch the two ring columns
                    cx = if on_edge_row || cx == x1 { cx + 1 } else { x1 };
                }
            }
            // anything outside ring r is at least r cells from the query
            if out.len() == k && out[k - 1].0 < (r as f64 * self.cell).powi(2) {
                return;
            }
        }
    }
}

fn insert_sorted(out: &mut Vec<(f64, usize)>, k: usize, item: (f64, usize)) {
    if out.len() == k && !lex_less(item, out[k - 1]) {
        return;
    }
    let pos = out.partition_point(|&e| lex_less(e, item));
    out.insert(pos, item);
    out.truncate(k);
}

fn lex_less(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Interpolated raster and per-pixel distance to the nearest site, both
/// row-major `width × height`. Exact at sites that sit on pixel centres.
pub fn idw_raster(index: &SiteIndex, values: &[f64], width: u32, height: u32) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(index.len(), values.len());
    let w = width as usize;
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..height as usize)
        .into_par_iter()
        .map(|v| {
            let mut nn = Vec::with_capacity(IDW_NEIGHBORS + 1);
            let mut out = Vec::with_capacity(w);
            let mut dist = Vec::with_capacity(w);
            for u in 0..w {
                index.knn(u as f64, v as f64, IDW_NEIGHBORS, None, &mut nn);
                out.push(idw_value(&nn, values));
                dist.push(nn.first().map_or(f64::INFINITY, |e| e.0.sqrt()));
            }
            (out, dist)
        })
        .collect();
    let mut depth = Vec::with_capacity(w * height as usize);
    let mut nearest = Vec::with_capacity(w * height as usize);
    for (d, n) in rows {
        depth.extend(d);
        nearest.extend(n);
    }
    (depth, nearest)
}

fn idw_value(nn: &[(f64, usize)], values: &[f64]) -> f64 {
    let Some(&(d2, first)) = nn.first() else {
        return f64::NAN;
    };
    let base = values[first];
    if d2 == 0.0 {
        return base;
    }
    // offsets from the nearest value keep constant fields exact
    let (mut num, mut den) = (0.0, 0.0);
    for &(d2, i) in nn {
        let w = 1.0 / d2.powf(IDW_POWER / 2.0);
        num += w * (values[i] - base);
        den += w;
    }
    base + num / den
}

/// Median nearest-neighbor distance between sites (0 for fewer than two).
pub fn median_spacing(index: &SiteIndex) -> f64 {
    if index.len() < 2 {
        return 0.0;
    }
    let mut nn = Vec::with_capacity(1);
    let mut d: Vec<f64> = (0..index.len())
        .map(|i| {
            let s = index.site(i);
            index.knn(s[0], s[1], 1, Some(i), &mut nn);
            nn[0].0.sqrt()
        })
        .collect();
    d.sort_by(f64::total_cmp);
    let n = d.len();
    if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    }
}
