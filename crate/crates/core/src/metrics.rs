//! Accuracy and quality indicators: relative error, marker separation errors,
//! and ground-truth-free DSM statistics.

use nalgebra::Vector3;
use thiserror::Error;

use crate::fusion::HeightRaster;

pub const NMAD_SCALE: f64 = 1.4826;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("ground-truth distance must be positive, got {0}")]
    ZeroGroundTruth(f64),
    #[error("need at least {need} valid cells, have {have}")]
    TooFewCells { need: usize, have: usize },
    #[error("window size {0} must be odd and at least 3")]
    InvalidWindow(usize),
    #[error("no marker pairs")]
    NoPairs,
}

/// Neumaier-compensated sum in iteration order.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in values {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// `|measured − gt| / gt × 100`.
pub fn relative_error(d_measured: f64, d_gt: f64) -> Result<f64, MetricsError> {
    if !(d_gt > 0.0) {
        return Err(MetricsError::ZeroGroundTruth(d_gt));
    }
    Ok((d_measured - d_gt).abs() / d_gt * 100.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkerPair {
    pub id_a: String,
    pub id_b: String,
    pub measured_a: Vector3<f64>,
    pub measured_b: Vector3<f64>,
    pub gt_xy_separation: f64,
    pub gt_z_separation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairError {
    pub id_a: String,
    pub id_b: String,
    pub measured_xy: f64,
    pub measured_z: f64,
    /// Percent.
    pub rel_xy: f64,
    pub rel_z: f64,
    /// Meters: relative error times the ground-truth separation.
    pub e_xy: f64,
    pub e_z: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkerErrors {
    pub e_xy: f64,
    pub e_z: f64,
    /// Mean relative errors in percent.
    pub rel_xy: f64,
    pub rel_z: f64,
    pub pairs: Vec<PairError>,
}

/// Planimetric and vertical separation errors per pair, averaged over pairs.
pub fn marker_errors(pairs: &[MarkerPair]) -> Result<MarkerErrors, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::NoPairs);
    }
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        let d = p.measured_b - p.measured_a;
        let measured_xy = d.xy().norm();
        let measured_z = d.z.abs();
        let rel_xy = relative_error(measured_xy, p.gt_xy_separation)?;
        let rel_z = relative_error(measured_z, p.gt_z_separation)?;
        out.push(PairError {
            id_a: p.id_a.clone(),
            id_b: p.id_b.clone(),
            measured_xy,
            measured_z,
            rel_xy,
            rel_z,
            e_xy: rel_xy / 100.0 * p.gt_xy_separation,
            e_z: rel_z / 100.0 * p.gt_z_separation,
        });
    }
    let n = out.len() as f64;
    let mean = |f: fn(&PairError) -> f64| compensated_sum(out.iter().map(f)) / n;
    Ok(MarkerErrors { e_xy: mean(|p| p.e_xy), e_z: mean(|p| p.e_z), rel_xy: mean(|p| p.rel_xy), rel_z: mean(|p| p.rel_z), pairs: out })
}

/// `|V| / (rows · cols)`.
pub fn coverage(h: &HeightRaster) -> f64 {
    h.valid_count() as f64 / (h.rows * h.cols) as f64
}

fn valid_cells(h: &HeightRaster) -> Vec<f64> {
    h.values().flatten().collect()
}

/// Population standard deviation (divides by `n`) with compensated sums.
pub fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = compensated_sum(values.iter().copied()) / n;
    (compensated_sum(values.iter().map(|x| (x - mean) * (x - mean))) / n).sqrt()
}

/// Population standard deviation over all valid cells.
pub fn sigma_global(h: &HeightRaster) -> Result<f64, MetricsError> {
    let v = valid_cells(h);
    if v.len() < 2 {
        return Err(MetricsError::TooFewCells { need: 2, have: v.len() });
    }
    Ok(population_std(&v))
}

/// Median; an even count takes the midpoint of the central pair.
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// `1.4826 · median |H_p − median(H)|` over valid cells.
pub fn nmad(h: &HeightRaster) -> Result<f64, MetricsError> {
    let mut v = valid_cells(h);
    if v.is_empty() {
        return Err(MetricsError::TooFewCells { need: 1, have: 0 });
    }
    Ok(nmad_of(&mut v))
}

pub fn nmad_of(values: &mut [f64]) -> f64 {
    let m = median(values);
    let mut dev: Vec<f64> = values.iter().map(|x| (x - m).abs()).collect();
    NMAD_SCALE * median(&mut dev)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalStd {
    pub value: f64,
    /// Cells whose window held more than one valid value.
    pub cells: usize,
}

impl LocalStd {
    /// True when no cell qualified and `value` is a placeholder 0.
    pub fn is_empty(&self) -> bool {
        self.cells == 0
    }
}

/// Mean over valid cells of the population std inside a `k × k` window
/// centred on the cell (the cell included, clipped at the borders, invalid
/// cells skipped). Cells whose window holds a single valid value are left out.
pub fn mean_local_std(h: &HeightRaster, k: usize) -> Result<LocalStd, MetricsError> {
    if k < 3 || k % 2 == 0 {
        return Err(MetricsError::InvalidWindow(k));
    }
    let r = k / 2;
    let mut stds = Vec::new();
    let mut window = Vec::with_capacity(k * k);
    for row in 0..h.rows {
        for col in 0..h.cols {
            if h.get(row, col).is_none() {
                continue;
            }
            window.clear();
            for wr in row.saturating_sub(r)..=(row + r).min(h.rows - 1) {
                for wc in col.saturating_sub(r)..=(col + r).min(h.cols - 1) {
                    if let Some(x) = h.get(wr, wc) {
                        window.push(x);
                    }
                }
            }
            if window.len() > 1 {
                stds.push(population_std(&window));
            }
        }
    }
    if stds.is_empty() {
        return Ok(LocalStd { value: 0.0, cells: 0 });
    }
    Ok(LocalStd { value: compensated_sum(stds.iter().copied()) / stds.len() as f64, cells: stds.len() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityReport {
    pub coverage: f64,
    pub sigma_global: f64,
    pub nmad: f64,
    pub mean_local_std: f64,
    pub window_k: usize,
    pub cell_count: usize,
}

pub fn quality_report(h: &HeightRaster, k: usize) -> Result<QualityReport, MetricsError> {
    Ok(QualityReport {
        coverage: coverage(h),
        sigma_global: sigma_global(h)?,
        nmad: nmad(h)?,
        mean_local_std: mean_local_std(h, k)?.value,
        window_k: k,
        cell_count: h.valid_count(),
    })
}
