//! The streaming run: one BA lane, a densifier pool and an ordered fusion writer.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use log::{debug, info, warn};
use nalgebra::{Vector2, Vector3};
use serde::Serialize;

use super::inputs::{validate_inputs, InputStream};
use super::{PipelineConfig, PipelineError};
use crate::anchor::{build_anchor_map, AnchorMap};
use crate::ba::{filter_tracks, initialize_window, solve, BaDiagnostics, BaError, BaSolution, Track};
use crate::clustering::{cluster_stream, Cluster, ClusterError};
use crate::densify::{densify_with_fallback, DepthMap};
use crate::fusion::{extract_point_cloud, orthomosaic, rasterize_dsm, OrthoView, TsdfVolume};
use crate::geometry::{back_project, project, triangulate_views, CameraIntrinsics, Frame, FrameId, Pose};
use crate::io::{self, MarkerErrorRecord, MarkerPairRecord, MarkerRecord};
use crate::metrics::{marker_errors, quality_report, MarkerErrors, MarkerPair, QualityReport};

pub const CLOUD_FILE: &str = "cloud.ply";
pub const DSM_FILE: &str = "dsm.fdepth";
pub const DSM_HEADER_FILE: &str = "dsm.hdr";
pub const ORTHO_FILE: &str = "ortho.ppm";
pub const REPORT_FILE: &str = "report.txt";
pub const MARKERS_MEASURED_FILE: &str = "markers_measured.csv";
pub const MARKER_ERRORS_FILE: &str = "marker_errors.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub ba_ms: f64,
    pub anchor_ms: f64,
    pub densify_ms: f64,
    pub fuse_ms: f64,
}

impl StageTimings {
    pub fn total_ms(&self) -> f64 {
        self.ba_ms + self.anchor_ms + self.densify_ms + self.fuse_ms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaStats {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub inlier_count: usize,
    pub pruned_count: usize,
    pub rms_px: f64,
    pub termination: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterRecord {
    pub cluster: usize,
    pub frame_ids: Vec<u32>,
    pub l: usize,
    pub m: usize,
    pub representative: u32,
    pub ba_window: [u32; 3],
    pub mode: String,
    pub warning: Option<String>,
    /// `ok`, `flagged` (densifier fell back) or `failed`.
    pub status: String,
    pub error: Option<String>,
    pub ba: Option<BaStats>,
    pub anchor_count: usize,
    pub densifier: Option<String>,
    pub timings: StageTimings,
    /// Sum of the stage timings.
    pub wall_ms: f64,
    pub per_image_ms: f64,
}

impl ClusterRecord {
    fn new(k: usize, c: &Cluster) -> Self {
        Self {
            cluster: k,
            frame_ids: c.frame_ids.iter().map(|f| f.0).collect(),
            l: c.len(),
            m: c.representative_index,
            representative: c.representative().0,
            ba_window: c.ba_window.map(|f| f.0),
            mode: format!("{:?}", c.mode),
            warning: c.warning.map(|w| format!("{w:?}")),
            status: "ok".into(),
            error: None,
            ba: None,
            anchor_count: 0,
            densifier: None,
            timings: StageTimings::default(),
            wall_ms: 0.0,
            per_image_ms: 0.0,
        }
    }

    fn fail(&mut self, stage: &str, e: impl std::fmt::Display) {
        warn!("cluster {} failed in {stage}: {e}", self.cluster);
        self.status = "failed".into();
        self.error = Some(format!("{stage}: {e}"));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub input: PathBuf,
    pub frames: usize,
    pub tracks: usize,
    pub rejected_tracks: usize,
    pub clusters: Vec<ClusterRecord>,
    /// Artifact name to path.
    pub artifacts: BTreeMap<String, PathBuf>,
    pub total_ms: f64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub manifest: RunManifest,
    pub report: QualityReport,
    pub markers: Option<MarkerErrors>,
    /// Camera poses from every successful BA window.
    pub poses: BTreeMap<FrameId, Pose>,
    /// Final BA solution per cluster, `None` where BA failed.
    pub solutions: Vec<Option<BaSolution>>,
}

struct Outcome {
    k: usize,
    record: ClusterRecord,
    depth: Option<DepthMap>,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Processes the input stream end to end and writes every artifact into
/// `config.output`. Per-cluster failures are flagged in the manifest and
/// skipped; input and configuration problems abort before any output.
pub fn run(config: &PipelineConfig) -> Result<RunSummary, PipelineError> {
    config.validate()?;
    let start = Instant::now();
    let InputStream { frames, mut tracks, markers, marker_pairs } = validate_inputs(&config.input).map_err(PipelineError::Input)?;
    let clusters = cluster_frames(&frames, config)?;
    info!("{} frames, {} tracks, {} clusters", frames.len(), tracks.len(), clusters.len());

    let intrinsics: BTreeMap<FrameId, CameraIntrinsics> = frames.iter().map(|f| (f.id, f.intrinsics)).collect();
    let rejected = prefilter_tracks(&frames, &mut tracks, config);
    info!("epipolar filter rejected {rejected} of {} tracks", tracks.len());

    let by_id: BTreeMap<FrameId, &Frame> = frames.iter().map(|f| (f.id, f)).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))?;
    let (tx, rx) = mpsc::channel::<Outcome>();
    let mut solutions: Vec<Option<BaSolution>> = vec![None; clusters.len()];
    let n = clusters.len();
    let (fused, outcomes) = std::thread::scope(|scope| {
        let writer = scope.spawn(|| fuse_in_order(rx, n, config));
        pool.in_place_scope(|s| {
            let mut previous: Option<BaSolution> = None;
            let mut solved = BTreeMap::new();
            for (k, cluster) in clusters.iter().enumerate() {
                let mut record = ClusterRecord::new(k, cluster);
                let t = Instant::now();
                let solved = run_ba(cluster, &by_id, &tracks, previous.as_ref(), &mut solved, config);
                record.timings.ba_ms = ms(t);
                let solution = match solved {
                    Ok(sol) => sol,
                    Err(e) => {
                        record.fail("bundle_adjustment", e);
                        tx.send(Outcome { k, record, depth: None }).expect("fusion writer alive");
                        continue;
                    }
                };
                info!("{}", BaDiagnostics { cluster: k, solution: &solution });
                record.ba = Some(BaStats {
                    iterations: solution.iterations,
                    initial_cost: solution.initial_cost,
                    final_cost: solution.final_cost,
                    inlier_count: solution.inlier_count,
                    pruned_count: solution.pruned_count,
                    rms_px: solution.rms_reprojection,
                    termination: format!("{:?}", solution.termination),
                });
                let t = Instant::now();
                let rep = by_id[&cluster.representative()];
                let anchor = build_anchor_map(&solution, rep);
                record.timings.anchor_ms = ms(t);
                solutions[k] = Some(solution.clone());
                previous = Some(solution);
                let anchor: AnchorMap = match anchor {
                    Ok(a) => a,
                    Err(e) => {
                        record.fail("anchor", e);
                        tx.send(Outcome { k, record, depth: None }).expect("fusion writer alive");
                        continue;
                    }
                };
                record.anchor_count = anchor.len();
                let tx = tx.clone();
                let image = rep.image.clone();
                s.spawn(move |_| {
                    let t = Instant::now();
                    let result = densify_with_fallback(image.as_deref(), &anchor, &config.densifier);
                    record.timings.densify_ms = ms(t);
                    let depth = match result {
                        Ok((d, fallback)) => {
                            record.densifier = Some(d.producer.clone());
                            if let Some(e) = fallback {
                                record.status = "flagged".into();
                                record.error = Some(format!("densifier: {e}; fell back to idw"));
                            }
                            Some(d)
                        }
                        Err(e) => {
                            record.fail("densifier", e);
                            None
                        }
                    };
                    tx.send(Outcome { k, record, depth }).expect("fusion writer alive");
                });
            }
        });
        drop(tx);
        writer.join().expect("fusion writer panicked")
    });
    let mut records: Vec<ClusterRecord> = outcomes.iter().map(|o| o.record.clone()).collect();
    for r in &mut records {
        r.wall_ms = r.timings.total_ms();
        r.per_image_ms = r.wall_ms / r.l as f64;
        if r.per_image_ms > config.time_budget_per_image * 1e3 {
            warn!("cluster {} took {:.0} ms per image, over the {:.1} s budget", r.cluster, r.per_image_ms, config.time_budget_per_image);
        }
    }
    let Some(volume) = fused else { return Err(PipelineError::NothingFused) };

    let out = &config.output;
    fs::create_dir_all(out)?;
    let mut artifacts = BTreeMap::new();
    let cloud = extract_point_cloud(&volume)?;
    write_file(out, CLOUD_FILE, &mut artifacts, |w| io::write_ply(w, &cloud))?;
    let dsm = rasterize_dsm(&cloud.points, config.fusion.dsm_cell_size)?;
    write_file(out, DSM_FILE, &mut artifacts, |w| io::write_fdepth(w, dsm.cols as u32, dsm.rows as u32, dsm.values()))?;
    write_file(out, DSM_HEADER_FILE, &mut artifacts, |w| io::write_dsm_header(w, &dsm))?;
    // metrics see the DSM exactly as stored
    let stored = io::read_dsm(&fs::read(out.join(DSM_FILE))?, std::io::BufReader::new(fs::File::open(out.join(DSM_HEADER_FILE))?))?;
    let views: Vec<OrthoView> = outcomes
        .iter()
        .filter_map(|o| o.depth.as_ref().map(|d| OrthoView { image: by_id[&d.frame_id].image.as_deref(), depth: d }))
        .collect();
    if views.iter().any(|v| v.image.is_some()) {
        let ortho = orthomosaic(&views, &dsm, config.fusion.occlusion_tol)?;
        write_file(out, ORTHO_FILE, &mut artifacts, |w| io::write_ppm(w, &ortho.image))?;
    }
    let report = quality_report(&stored, config.metrics_window_k).map_err(|e| PipelineError::Fusion(crate::fusion::FusionError::InvalidRaster(e.to_string())))?;

    let mut poses = BTreeMap::new();
    for sol in solutions.iter().flatten() {
        poses.extend(sol.poses.iter().map(|(k, v)| (*k, *v)));
    }
    let marker_result = if markers.is_empty() {
        None
    } else {
        let measured = measure_markers(&markers, &tracks, &poses, &intrinsics);
        write_file(out, MARKERS_MEASURED_FILE, &mut artifacts, |w| io::write_csv(w, &measured))?;
        let errors = marker_pair_errors(&measured, &marker_pairs);
        if let Some((errs, gt)) = &errors {
            let rows: Vec<MarkerErrorRecord> = io::marker_error_records(errs, gt);
            write_file(out, MARKER_ERRORS_FILE, &mut artifacts, |w| io::write_csv(w, &rows))?;
        }
        errors.map(|(e, _)| e)
    };
    write_file(out, REPORT_FILE, &mut artifacts, |w| io::write_report(w, &report, marker_result.as_ref()))?;

    artifacts.insert("manifest".into(), out.join(MANIFEST_FILE));
    let manifest = RunManifest {
        config_hash: config.hash(),
        input: config.input.clone(),
        frames: frames.len(),
        tracks: tracks.len(),
        rejected_tracks: rejected,
        clusters: records,
        artifacts,
        total_ms: ms(start),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(out.join(MANIFEST_FILE), json + "\n")?;
    Ok(RunSummary { manifest, report, markers: marker_result, poses, solutions })
}

fn write_file(
    dir: &Path,
    name: &str,
    artifacts: &mut BTreeMap<String, PathBuf>,
    f: impl FnOnce(&mut BufWriter<fs::File>) -> Result<(), io::IoError>,
) -> Result<(), PipelineError> {
    let path = dir.join(name);
    let mut w = BufWriter::new(fs::File::create(&path)?);
    f(&mut w)?;
    w.flush()?;
    let key = name.split('.').next().unwrap_or(name).to_string();
    artifacts.insert(key, path);
    Ok(())
}

fn cluster_frames(frames: &[Frame], config: &PipelineConfig) -> Result<Vec<Cluster>, PipelineError> {
    cluster_stream(frames, &config.clustering).map_err(|e| match e {
        ClusterError::InvalidPolicy(m) => PipelineError::Config(m),
        other => PipelineError::Input(vec![io::Diagnostic::new(super::FRAMES_FILE, 0, other.to_string())]),
    })
}

/// Epipolar RANSAC over every frame pair at most `ransac_pair_span` stream
/// positions apart; returns the number of newly rejected tracks.
pub fn prefilter_tracks(frames: &[Frame], tracks: &mut [Track], config: &PipelineConfig) -> usize {
    let intrinsics: BTreeMap<FrameId, CameraIntrinsics> = frames.iter().map(|f| (f.id, f.intrinsics)).collect();
    let span = config.ransac_pair_span;
    let pairs: Vec<(FrameId, FrameId)> = (0..frames.len())
        .flat_map(|i| (i + 1..frames.len().min(i + span + 1)).map(move |j| (i, j)))
        .map(|(i, j)| (frames[i].id, frames[j].id))
        .collect();
    let ba = &config.ba;
    filter_tracks(tracks, &pairs, &intrinsics, ba.ransac_threshold_px, ba.ransac_max_iters, ba.seed)
}

/// Sparse half of the run without densification or output: clusters the
/// stream, prefilters `tracks` in place and solves every BA window in order.
pub fn solve_clusters(
    frames: &[Frame],
    tracks: &mut [Track],
    config: &PipelineConfig,
) -> Result<(Vec<Cluster>, Vec<Result<BaSolution, BaError>>), PipelineError> {
    config.validate()?;
    let clusters = cluster_frames(frames, config)?;
    prefilter_tracks(frames, tracks, config);
    let by_id: BTreeMap<FrameId, &Frame> = frames.iter().map(|f| (f.id, f)).collect();
    let mut previous: Option<BaSolution> = None;
    let mut solved = BTreeMap::new();
    let mut out = Vec::with_capacity(clusters.len());
    for cluster in &clusters {
        let sol = run_ba(cluster, &by_id, tracks, previous.as_ref(), &mut solved, config);
        if let Ok(s) = &sol {
            previous = Some(s.clone());
        }
        out.push(sol);
    }
    Ok((clusters, out))
}

fn run_ba(
    cluster: &Cluster,
    by_id: &BTreeMap<FrameId, &Frame>,
    tracks: &[Track],
    previous: Option<&BaSolution>,
    solved: &mut BTreeMap<FrameId, Pose>,
    config: &PipelineConfig,
) -> Result<BaSolution, BaError> {
    let window: Vec<&Frame> = cluster.ba_window.iter().map(|id| by_id[id]).collect();
    let problem = initialize_window(&window, tracks, previous, &config.ba)?;
    let mut solution = solve(&problem, &config.ba.solver)?;
    let limit = 3.0 * problem.robust_delta / problem.resolution_scale;
    let dropped = verify_against_solved(&mut solution, tracks, by_id, solved, limit);
    if dropped > 0 {
        debug!("window {:?}: {dropped} points disagree with earlier solved frames", cluster.ba_window);
    }
    for (id, pose) in &solution.poses {
        solved.entry(*id).or_insert(*pose);
    }
    Ok(solution)
}

/// A window sees most tracks in two or three frames only, and a two-view point
/// whose bad observation slid along the epipolar line fits exactly. Frames
/// solved by earlier clusters give those points more views: a point that
/// misses one of its observations there by more than `limit_px` is dropped.
fn verify_against_solved(
    solution: &mut BaSolution,
    tracks: &[Track],
    by_id: &BTreeMap<FrameId, &Frame>,
    solved: &BTreeMap<FrameId, Pose>,
    limit_px: f64,
) -> usize {
    let by_track: BTreeMap<_, &Track> = tracks.iter().map(|t| (t.track_id, t)).collect();
    let before = solution.points.len();
    solution.points.retain(|id, tp| {
        let Some(track) = by_track.get(id) else { return true };
        track.observations.iter().all(|o| {
            if solution.poses.contains_key(&o.frame_id) {
                return true;
            }
            let (Some(pose), Some(frame)) = (solved.get(&o.frame_id), by_id.get(&o.frame_id)) else { return true };
            matches!(project(&frame.intrinsics, pose, &tp.position), Ok(uv) if (uv - o.pixel).norm() <= limit_px)
        })
    });
    let dropped = before - solution.points.len();
    solution.pruned_count += dropped;
    solution.inlier_count = solution.inlier_count.saturating_sub(dropped);
    dropped
}

/// Integrates depth maps strictly in cluster order, buffering early arrivals.
fn fuse_in_order(rx: mpsc::Receiver<Outcome>, n: usize, config: &PipelineConfig) -> (Option<TsdfVolume>, Vec<Outcome>) {
    let mut pending: BTreeMap<usize, Outcome> = BTreeMap::new();
    let mut done = Vec::with_capacity(n);
    let mut volume: Option<TsdfVolume> = None;
    for o in rx {
        pending.insert(o.k, o);
        while let Some(mut o) = pending.remove(&done.len()) {
            if let Some(depth) = &o.depth {
                let t = Instant::now();
                let vol = volume.get_or_insert_with(|| initial_volume(depth, config));
                if let Err(e) = vol.integrate_depth(depth) {
                    o.record.fail("fusion", e);
                    o.depth = None;
                }
                o.record.timings.fuse_ms = ms(t);
            }
            done.push(o);
        }
    }
    debug_assert_eq!(done.len(), n);
    let volume = volume.filter(|v| !v.is_empty());
    (volume, done)
}

/// A growing volume seeded with the bounding box of the first depth map.
fn initial_volume(depth: &DepthMap, config: &PipelineConfig) -> TsdfVolume {
    let f = &config.fusion;
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for v in (0..depth.height).step_by(8) {
        for u in (0..depth.width).step_by(8) {
            if let Some(d) = depth.get(u, v) {
                let p = back_project(&depth.intrinsics, &depth.pose, &Vector2::new(u as f64, v as f64), d);
                lo = lo.inf(&p);
                hi = hi.sup(&p);
            }
        }
    }
    if !lo.iter().all(|x| x.is_finite()) {
        lo = depth.pose.center();
        hi = lo;
    }
    let pad = Vector3::repeat(f.truncation_voxels * f.voxel_size + f.voxel_size);
    let mut vol = TsdfVolume::covering(lo - pad, hi + pad, f.voxel_size).expect("validated fusion config");
    vol.truncation = f.truncation_voxels * f.voxel_size;
    vol.max_weight = f.max_weight;
    vol.auto_grow = true;
    vol
}

/// Triangulates each marker's track from every posed frame that observes it.
/// Markers with fewer than two posed views keep NaN coordinates.
pub fn measure_markers(
    markers: &[MarkerRecord],
    tracks: &[Track],
    poses: &BTreeMap<FrameId, Pose>,
    intrinsics: &BTreeMap<FrameId, CameraIntrinsics>,
) -> Vec<MarkerRecord> {
    let by_id: BTreeMap<u64, &Track> = tracks.iter().map(|t| (t.track_id, t)).collect();
    markers
        .iter()
        .map(|m| {
            let views: Vec<_> = by_id
                .get(&m.track_id)
                .map(|t| {
                    t.observations
                        .iter()
                        .filter_map(|o| Some((*poses.get(&o.frame_id)?, *intrinsics.get(&o.frame_id)?, o.pixel)))
                        .collect()
                })
                .unwrap_or_default();
            let p = match triangulate_views(&views) {
                Ok(p) => p,
                Err(e) => {
                    warn!("marker {} not measured: {e}", m.marker_id);
                    Vector3::repeat(f64::NAN)
                }
            };
            MarkerRecord { marker_id: m.marker_id.clone(), track_id: m.track_id, x: p.x, y: p.y, z: p.z }
        })
        .collect()
}

/// Pairs whose markers were both measured, with their ground truth.
pub fn marker_pair_errors(measured: &[MarkerRecord], gt: &[MarkerPairRecord]) -> Option<(MarkerErrors, Vec<MarkerPairRecord>)> {
    let pos: BTreeMap<&str, Vector3<f64>> =
        measured.iter().filter(|m| m.x.is_finite()).map(|m| (m.marker_id.as_str(), m.position())).collect();
    let mut pairs = Vec::new();
    let mut kept = Vec::new();
    for g in gt {
        let (Some(a), Some(b)) = (pos.get(g.marker_a.as_str()), pos.get(g.marker_b.as_str())) else {
            warn!("marker pair {}-{} skipped: a marker was not measured", g.marker_a, g.marker_b);
            continue;
        };
        pairs.push(MarkerPair {
            id_a: g.marker_a.clone(),
            id_b: g.marker_b.clone(),
            measured_a: *a,
            measured_b: *b,
            gt_xy_separation: g.xy_separation_m,
            gt_z_separation: g.z_separation_m,
        });
        kept.push(g.clone());
    }
    match marker_errors(&pairs) {
        Ok(e) => Some((e, kept)),
        Err(e) => {
            warn!("no marker errors: {e}");
            None
        }
    }
}
