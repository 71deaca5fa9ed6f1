use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x6, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::schur::{schur_solve, NormalEquations};
use super::{huber_weight, BaError, BaProblem, BaSolution, SolverConfig, TiePoint, TrackId};
use crate::geometry::{left_jacobian_inv, reprojection_residual, skew, FrameId, Pose};

const MAX_LAMBDA: f64 = 1e12;
/// Relative eigenvalue floor of the undamped reduced camera matrix.
const RANK_TOL: f64 = 1e-12;
const SIGMA_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    GradientTolerance,
    ParameterTolerance,
    MaxIterations,
    DampingLimit,
}

#[derive(Debug, Clone, Copy)]
enum CamParam {
    Fixed,
    Free { offset: usize },
    /// Centre constrained to a sphere about a fixed camera centre.
    Locked { offset: usize, reference: Vector3<f64>, length: f64 },
}

impl CamParam {
    fn dim(&self) -> usize {
        match self {
            CamParam::Fixed => 0,
            CamParam::Free { .. } => 6,
            CamParam::Locked { .. } => 5,
        }
    }

    fn offset(&self) -> Option<usize> {
        match *self {
            CamParam::Fixed => None,
            CamParam::Free { offset } | CamParam::Locked { offset, .. } => Some(offset),
        }
    }
}

/// Two unit vectors spanning the plane orthogonal to `v`.
fn tangent_basis(v: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let n = v.normalize();
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let a = n.cross(&helper).normalize();
    (a, n.cross(&a))
}

/// Maps a camera's minimal parameters to the pose update `[δω, δt]`.
fn basis(param: &CamParam, pose: &Pose) -> DMatrix<f64> {
    match *param {
        CamParam::Fixed => DMatrix::zeros(6, 0),
        CamParam::Free { .. } => DMatrix::identity(6, 6),
        CamParam::Locked { reference, .. } => {
            let (e1, e2) = tangent_basis(&(pose.center() - reference));
            let mut b = DMatrix::zeros(6, 5);
            for i in 0..3 {
                b[(i, i)] = 1.0;
            }
            // rotating about the fixed centre moves t by −[t]× δω
            b.view_mut((3, 0), (3, 3)).copy_from(&(-skew(&pose.translation)));
            let r = pose.rotation.matrix();
            b.view_mut((3, 3), (3, 1)).copy_from(&(-(r * e1)));
            b.view_mut((3, 4), (3, 1)).copy_from(&(-(r * e2)));
            b
        }
    }
}

fn retract(param: &CamParam, pose: &Pose, delta: &[f64]) -> Pose {
    match *param {
        CamParam::Fixed => *pose,
        CamParam::Free { .. } => pose.retract(&Vector6::from_column_slice(delta)),
        CamParam::Locked { reference, length, .. } => {
            let v = pose.center() - reference;
            let (e1, e2) = tangent_basis(&v);
            let rotated = pose.retract(&Vector6::new(delta[0], delta[1], delta[2], 0.0, 0.0, 0.0));
            let c = reference + (v + e1 * delta[3] + e2 * delta[4]).normalize() * length;
            Pose::from_center(rotated.rotation, c)
        }
    }
}

#[derive(Clone, Copy)]
enum Target {
    Free(usize),
    Fixed(Vector3<f64>),
}

struct Obs {
    cam: usize,
    track_id: TrackId,
    target: Target,
    pixel: Vector2<f64>,
}

struct Prior {
    cam: usize,
    center: Vector3<f64>,
    sigma: f64,
    rotation: nalgebra::Rotation3<f64>,
    attitude_sigma: f64,
}

struct Model<'a> {
    problem: &'a BaProblem,
    params: Vec<CamParam>,
    n_cam: usize,
    point_ids: Vec<TrackId>,
    obs: Vec<Obs>,
    priors: Vec<Prior>,
}

#[derive(Clone)]
struct State {
    poses: Vec<Pose>,
    points: Vec<Vector3<f64>>,
}

impl<'a> Model<'a> {
    fn new(problem: &'a BaProblem) -> Result<(Self, State), BaError> {
        let frames = &problem.window_frames;
        let index: BTreeMap<FrameId, usize> = frames.iter().enumerate().map(|(i, f)| (f.id, i)).collect();
        let mut poses: Vec<Pose> = frames.iter().map(|f| f.pose).collect();
        let mut params = Vec::with_capacity(frames.len());
        let mut n_cam = 0;
        for f in frames {
            let p = if problem.fixed_frame_ids.contains(&f.id) {
                CamParam::Fixed
            } else if let Some(lock) = problem.baseline_lock.filter(|l| l.frame == f.id) {
                let reference = poses[index[&lock.reference]].center();
                CamParam::Locked { offset: n_cam, reference, length: lock.length }
            } else {
                CamParam::Free { offset: n_cam }
            };
            n_cam += p.dim();
            params.push(p);
        }
        // start locked cameras on their sphere
        for (i, p) in params.iter().enumerate() {
            if let CamParam::Locked { reference, length, .. } = *p {
                let v = poses[i].center() - reference;
                if !(v.norm() > 0.0) {
                    return Err(BaError::InvalidProblem("locked camera coincides with its reference".into()));
                }
                poses[i] = Pose::from_center(poses[i].rotation, reference + v.normalize() * length);
            }
        }

        // free points need two observations to be determined
        let mut counts: BTreeMap<TrackId, usize> = BTreeMap::new();
        for o in &problem.observations {
            *counts.entry(o.track_id).or_default() += 1;
        }
        let point_ids: Vec<TrackId> =
            problem.points.keys().copied().filter(|id| counts.get(id).copied().unwrap_or(0) >= 2).collect();
        let point_index: BTreeMap<TrackId, usize> = point_ids.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        let points: Vec<Vector3<f64>> = point_ids.iter().map(|id| problem.points[id]).collect();

        let mut obs = Vec::with_capacity(problem.observations.len());
        for o in &problem.observations {
            let target = if let Some(&j) = point_index.get(&o.track_id) {
                Target::Free(j)
            } else if let Some(tp) = problem.fixed_points.get(&o.track_id) {
                Target::Fixed(tp.position)
            } else {
                continue;
            };
            obs.push(Obs { cam: index[&o.frame_id], track_id: o.track_id, target, pixel: o.pixel });
        }

        let priors = frames
            .iter()
            .enumerate()
            .filter(|(i, _)| !matches!(params[*i], CamParam::Fixed))
            .filter_map(|(i, f)| {
                f.prior.map(|p| Prior {
                    cam: i,
                    center: p.pose.center(),
                    sigma: p.sigma_position.max(SIGMA_FLOOR),
                    rotation: p.pose.rotation,
                    attitude_sigma: problem.attitude_sigma.max(1e-6),
                })
            })
            .collect();

        Ok((Self { problem, params, n_cam, point_ids, obs, priors }, State { poses, points }))
    }

    fn point(&self, st: &State, t: Target) -> Vector3<f64> {
        match t {
            Target::Free(j) => st.points[j],
            Target::Fixed(p) => p,
        }
    }

    fn prior_residuals(&self, st: &State, prior: &Prior) -> (Vector3<f64>, Vector3<f64>) {
        let pose = &st.poses[prior.cam];
        let rc = (pose.center() - prior.center) / prior.sigma;
        let phi = (pose.rotation * prior.rotation.inverse()).scaled_axis();
        (rc, phi / prior.attitude_sigma)
    }

    /// Robust energy, or `None` when any observation has non-positive depth.
    fn cost(&self, st: &State) -> Option<f64> {
        let delta = self.problem.robust_delta;
        let mut sum = 0.0;
        for o in &self.obs {
            let k = &self.problem.window_frames[o.cam].intrinsics;
            let rj = reprojection_residual(&o.pixel, k, &st.poses[o.cam], &self.point(st, o.target)).ok()?;
            sum += huber_weight(rj.residual.norm_squared(), delta).0;
        }
        for p in &self.priors {
            let (rc, ra) = self.prior_residuals(st, p);
            sum += rc.norm_squared() + ra.norm_squared();
        }
        Some(sum)
    }

    fn linearize(&self, st: &State) -> Result<(NormalEquations, f64), BaError> {
        let delta = self.problem.robust_delta;
        let mut ne = NormalEquations::zeros(self.n_cam, st.points.len());
        let bases: Vec<DMatrix<f64>> = self.params.iter().zip(&st.poses).map(|(p, pose)| basis(p, pose)).collect();
        let mut cost = 0.0;
        for o in &self.obs {
            let k = &self.problem.window_frames[o.cam].intrinsics;
            let rj = reprojection_residual(&o.pixel, k, &st.poses[o.cam], &self.point(st, o.target))?;
            let (c, w) = huber_weight(rj.residual.norm_squared(), delta);
            cost += c;
            let r = DVector::from_column_slice(rj.residual.as_slice());
            let param = &self.params[o.cam];
            let jc = param.offset().map(|off| (off, DMatrix::from_column_slice(2, 6, rj.d_pose.as_slice()) * &bases[o.cam]));
            if let Some((off, jc)) = &jc {
                let d = jc.ncols();
                let mut blk = ne.h_cc.view_mut((*off, *off), (d, d));
                blk += jc.transpose() * jc * w;
                let mut g = ne.g_c.rows_mut(*off, d);
                g += jc.transpose() * &r * w;
            }
            if let Target::Free(j) = o.target {
                let jp = rj.d_point;
                ne.h_pp[j] += jp.transpose() * jp * w;
                ne.g_p[j] += jp.transpose() * rj.residual * w;
                if let Some((off, jc)) = &jc {
                    let jp_d = DMatrix::from_column_slice(2, 3, jp.as_slice());
                    let mut blk = ne.h_cp[j].rows_mut(*off, jc.ncols());
                    blk += jc.transpose() * jp_d * w;
                }
            }
        }
        for p in &self.priors {
            let off = self.params[p.cam].offset().expect("priors only on free cameras");
            let pose = &st.poses[p.cam];
            let (rc, ra) = self.prior_residuals(st, p);
            cost += rc.norm_squared() + ra.norm_squared();
            let rt = pose.rotation.matrix().transpose();
            let mut j6 = Matrix3x6::zeros();
            j6.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-rt * skew(&pose.translation) / p.sigma));
            j6.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-rt / p.sigma));
            let mut ja = Matrix3x6::zeros();
            ja.fixed_view_mut::<3, 3>(0, 0).copy_from(&(left_jacobian_inv(&(ra * p.attitude_sigma)) / p.attitude_sigma));
            for (j6, r) in [(j6, rc), (ja, ra)] {
                let j = DMatrix::from_column_slice(3, 6, j6.as_slice()) * &bases[p.cam];
                let d = j.ncols();
                let r = DVector::from_column_slice(r.as_slice());
                let mut blk = ne.h_cc.view_mut((off, off), (d, d));
                blk += j.transpose() * &j;
                let mut g = ne.g_c.rows_mut(off, d);
                g += j.transpose() * r;
            }
        }
        Ok((ne, cost))
    }

    fn apply(&self, st: &State, dc: &DVector<f64>, dp: &[Vector3<f64>]) -> State {
        let poses = self
            .params
            .iter()
            .zip(&st.poses)
            .map(|(p, pose)| match p.offset() {
                None => *pose,
                Some(off) => retract(p, pose, &dc.as_slice()[off..off + p.dim()]),
            })
            .collect();
        let points = st.points.iter().zip(dp).map(|(p, d)| p + d).collect();
        State { poses, points }
    }

    fn state_norm(&self, st: &State) -> f64 {
        let mut s = 0.0;
        for (p, pose) in self.params.iter().zip(&st.poses) {
            if p.offset().is_some() {
                s += pose.translation.norm_squared();
            }
        }
        s += st.points.iter().map(|p| p.norm_squared()).sum::<f64>();
        s.sqrt()
    }
}

fn check_rank(ne: &NormalEquations) -> Result<(), BaError> {
    for (j, h) in ne.h_pp.iter().enumerate() {
        if h.cholesky().is_none() {
            return Err(BaError::SingularSystem(format!("point block {j} is rank deficient")));
        }
    }
    if ne.n_cam() == 0 {
        return Ok(());
    }
    let s = ne.reduced_camera_matrix();
    let eig = s.symmetric_eigenvalues();
    let max = eig.max();
    let min = eig.min();
    if !(max > 0.0) || min <= RANK_TOL * max {
        return Err(BaError::SingularSystem(format!(
            "reduced camera matrix eigenvalues span [{min:.3e}, {max:.3e}]"
        )));
    }
    Ok(())
}

struct LmOutcome {
    state: State,
    initial_cost: f64,
    final_cost: f64,
    iterations: usize,
    termination: Termination,
    history: Vec<f64>,
}

fn run_lm(model: &Model, mut st: State, cfg: &SolverConfig) -> Result<LmOutcome, BaError> {
    let (mut ne, mut cost) = model.linearize(&st)?;
    check_rank(&ne)?;
    let initial_cost = cost;
    let mut lambda = cfg.initial_lambda * ne.mean_diagonal();
    if !(lambda > 0.0) {
        lambda = cfg.initial_lambda;
    }
    let mut iterations = 0;
    let mut accepted_any = false;
    let mut history = vec![cost];
    let termination = loop {
        if ne.gradient_inf_norm() < cfg.gradient_tol {
            break Termination::GradientTolerance;
        }
        if iterations >= cfg.max_iters {
            break Termination::MaxIterations;
        }
        iterations += 1;
        let (dc, dp) = schur_solve(&ne, lambda)?;
        let step = (dc.norm_squared() + dp.iter().map(|d| d.norm_squared()).sum::<f64>()).sqrt();
        if step <= cfg.param_tol * (model.state_norm(&st) + cfg.param_tol) {
            break Termination::ParameterTolerance;
        }
        let trial = model.apply(&st, &dc, &dp);
        match model.cost(&trial) {
            Some(c) if c < cost => {
                st = trial;
                (ne, cost) = model.linearize(&st)?;
                lambda *= 0.5;
                accepted_any = true;
                history.push(cost);
            }
            _ => {
                lambda *= 4.0;
                if lambda > MAX_LAMBDA {
                    if !accepted_any {
                        return Err(BaError::Diverged);
                    }
                    break Termination::DampingLimit;
                }
            }
        }
    };
    Ok(LmOutcome { state: st, initial_cost, final_cost: cost, iterations, termination, history })
}

/// Marginal 1σ of each free point, `sqrt(trace(Σ_pp)/3)`, for unit pixel noise.
fn point_sigmas(ne: &NormalEquations) -> Vec<f64> {
    let s_inv = if ne.n_cam() > 0 { ne.reduced_camera_matrix().cholesky().map(|c| c.inverse()) } else { None };
    ne.h_cp
        .iter()
        .zip(&ne.h_pp)
        .map(|(hcp, hpp)| {
            let Some(inv) = hpp.try_inverse() else { return f64::MAX };
            let mut cov: Matrix3<f64> = inv;
            if let Some(s_inv) = &s_inv {
                let w = hcp * inv;
                let extra = w.transpose() * s_inv * &w;
                cov += Matrix3::from_column_slice(extra.as_slice());
            }
            (cov.trace() / 3.0).max(0.0).sqrt().max(1e-12)
        })
        .collect()
}

/// Refines the window; see the module docs for the energy being minimized.
pub fn solve(problem: &BaProblem, config: &SolverConfig) -> Result<BaSolution, BaError> {
    problem.validate()?;
    let (model, st) = Model::new(problem)?;
    let first = run_lm(&model, st, config)?;

    // prune points with large residuals or bad depth, then polish once
    let limit = 3.0 * problem.robust_delta;
    let mut pruned = BTreeSet::new();
    let mut dropped = BTreeSet::new();
    for o in &model.obs {
        let k = &problem.window_frames[o.cam].intrinsics;
        let p = model.point(&first.state, o.target);
        let ok = matches!(reprojection_residual(&o.pixel, k, &first.state.poses[o.cam], &p),
            Ok(r) if r.residual.norm() <= limit);
        if !ok {
            match o.target {
                Target::Free(_) => {
                    pruned.insert(o.track_id);
                }
                // fixed points cannot move; drop the disagreeing observation instead
                Target::Fixed(_) => {
                    dropped.insert((problem.window_frames[o.cam].id, o.track_id));
                }
            }
        }
    }
    if pruned.is_empty() && dropped.is_empty() {
        let iterations = first.iterations;
        return finish(problem, &model, first, iterations, 0);
    }
    let mut reduced = problem.clone();
    reduced.points = model
        .point_ids
        .iter()
        .zip(&first.state.points)
        .filter(|(id, _)| !pruned.contains(*id))
        .map(|(id, p)| (*id, *p))
        .collect();
    reduced.observations.retain(|o| {
        (reduced.points.contains_key(&o.track_id) || reduced.fixed_points.contains_key(&o.track_id))
            && !dropped.contains(&(o.frame_id, o.track_id))
    });
    for (f, p) in reduced.window_frames.iter_mut().zip(&first.state.poses) {
        f.pose = *p;
    }
    let (model2, st2) = Model::new(&reduced)?;
    if model2.obs.is_empty() {
        return Err(BaError::DegenerateGeometry("every point was pruned".into()));
    }
    let second = run_lm(&model2, st2, config)?;
    let iterations = first.iterations + second.iterations;
    let mut history = first.history;
    history.extend(second.history);
    let outcome = LmOutcome { initial_cost: first.initial_cost, history, ..second };
    finish(problem, &model2, outcome, iterations, pruned.len())
}

fn finish(
    original: &BaProblem,
    model: &Model,
    outcome: LmOutcome,
    iterations: usize,
    pruned_count: usize,
) -> Result<BaSolution, BaError> {
    let problem = model.problem;
    let st = &outcome.state;
    let (ne, _) = model.linearize(st)?;
    let sigmas = point_sigmas(&ne);
    let mut observing: BTreeMap<TrackId, Vec<FrameId>> = BTreeMap::new();
    let mut sq = 0.0;
    for o in &model.obs {
        observing.entry(o.track_id).or_default().push(problem.window_frames[o.cam].id);
        let k = &problem.window_frames[o.cam].intrinsics;
        if let Ok(r) = reprojection_residual(&o.pixel, k, &st.poses[o.cam], &model.point(st, o.target)) {
            sq += r.residual.norm_squared();
        }
    }
    let rms = if model.obs.is_empty() { 0.0 } else { (sq / model.obs.len() as f64).sqrt() / problem.resolution_scale };
    let mut points = BTreeMap::new();
    for (j, id) in model.point_ids.iter().enumerate() {
        let mut frames = observing.remove(id).unwrap_or_default();
        frames.sort();
        let tp = TiePoint { position: st.points[j], track_id: *id, uncertainty: sigmas[j], observing_frames: frames };
        points.insert(*id, tp);
    }
    for (id, tp) in &problem.fixed_points {
        if let Some(mut frames) = observing.remove(id) {
            frames.sort();
            points.insert(*id, TiePoint { observing_frames: frames, ..tp.clone() });
        }
    }
    // fixed frames keep their exact input values
    let poses = original
        .window_frames
        .iter()
        .zip(&st.poses)
        .map(|(f, p)| if original.fixed_frame_ids.contains(&f.id) { (f.id, f.pose) } else { (f.id, *p) })
        .collect();
    Ok(BaSolution {
        poses,
        inlier_count: points.len(),
        points,
        fixed_frame_ids: original.fixed_frame_ids.clone(),
        initial_cost: outcome.initial_cost,
        final_cost: outcome.final_cost,
        iterations,
        pruned_count,
        rms_reprojection: rms,
        termination: outcome.termination,
        cost_history: outcome.history,
    })
}
