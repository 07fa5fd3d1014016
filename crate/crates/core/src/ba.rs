//! Sliding-window bundle adjustment over poses, sparse points and per-frame
//! depth scales, solved with Levenberg–Marquardt on the point-eliminated
//! (Schur complement) normal equations.
//!
//! Frame 0 of the window is the gauge: its pose and depth scale are held
//! fixed. Each other frame contributes 7 unknowns (`ω`, `ρ`, scale).

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3};

use crate::depth::DepthMap;
use crate::epipolar::triangulate;
use crate::geometry::{CameraIntrinsics, Pixel, Point3, Pose};
use crate::losses::{
    active_cycle_pairs, evaluate, junction_residuals, Component, CyclePair, EdgeAnchor, Evaluation, Junction3d,
    LossError, LossWeights, Observation,
};
#[allow(unused_imports)]
use num_traits::Float;

/// Default window length.
pub const DEFAULT_WINDOW: usize = 5;
/// Minimum number of triangulated points for a window.
pub const MIN_POINTS: usize = 8;
/// Damping beyond which a failed factorization is reported as singular.
pub const MU_SINGULAR: f64 = 1e8;
/// Damping beyond which the solver gives up on finding a descent step.
pub const MU_MAX: f64 = 1e16;
const CAM: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum BaError {
    #[error("need at least {MIN_POINTS} triangulated points, found {found}")]
    InsufficientMatches { found: usize },
    #[error("window needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("invalid problem: {0}")]
    Invalid(&'static str),
    #[error("damped normal equations are singular at mu = {mu}")]
    Singular { mu: f64 },
    #[error("non-finite residual")]
    NonFinite,
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowFrame {
    pub id: u64,
    pub timestamp: f64,
    /// World-to-camera.
    pub pose: Pose,
    pub depth_scale: f64,
    pub depth: Option<Arc<DepthMap>>,
}

impl WindowFrame {
    pub fn new(id: u64, timestamp: f64, pose: Pose, depth: Option<Arc<DepthMap>>) -> Self {
        Self {
            id,
            timestamp,
            pose,
            depth_scale: 1.0,
            depth,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowProblem {
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<WindowFrame>,
    /// World coordinates.
    pub points: Vec<Point3>,
    /// Stable identifier per point, parallel to `points`.
    pub point_ids: Vec<u64>,
    pub observations: Vec<Observation>,
    pub anchors: Vec<EdgeAnchor>,
    pub junctions: Vec<Junction3d>,
    pub weights: LossWeights,
    /// Huber threshold on pixel residuals; `None` for plain squares.
    pub huber: Option<f64>,
}

impl WindowProblem {
    pub fn poses(&self) -> Vec<Pose> {
        self.frames.iter().map(|f| f.pose).collect()
    }

    pub fn scales(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.depth_scale).collect()
    }

    pub fn validate(&self) -> Result<(), BaError> {
        if self.frames.len() < 2 {
            return Err(BaError::TooFewFrames(self.frames.len()));
        }
        if self.points.len() != self.point_ids.len() {
            return Err(BaError::Invalid("point ids out of sync"));
        }
        if self.frames.iter().any(|f| !(f.depth_scale > 0.0)) {
            return Err(BaError::Invalid("depth scale must be positive"));
        }
        let nf = self.frames.len();
        if self
            .observations
            .iter()
            .any(|o| o.frame_index >= nf || o.point_index >= self.points.len())
        {
            return Err(BaError::Invalid("observation index out of range"));
        }
        if self.anchors.iter().any(|a| a.source_frame >= nf || !(a.depth > 0.0)) {
            return Err(BaError::Invalid("bad anchor"));
        }
        if self.junctions.iter().any(|j| j.frame >= nf) {
            return Err(BaError::Invalid("junction frame out of range"));
        }
        self.weights.validate()?;
        Ok(())
    }

    /// Refreshes anchor world points after the poses or scales changed.
    pub fn update_anchors(&mut self) {
        for a in self.anchors.iter_mut() {
            let f = &self.frames[a.source_frame];
            a.update_world(&self.intrinsics, &f.pose, f.depth_scale);
        }
    }
}

/// One 3D point's pixel observations: `(window frame index, pixel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: u64,
    pub observations: Vec<(usize, Pixel)>,
}

/// Triangulates tracks seen in at least two frames (first and last
/// observation) and appends them; returns how many were added.
pub fn add_tracks(p: &mut WindowProblem, tracks: &[Track]) -> usize {
    let mut added = 0;
    for t in tracks {
        let mut obs = t.observations.clone();
        obs.sort_by_key(|o| o.0);
        obs.dedup_by_key(|o| o.0);
        if obs.len() < 2 || obs.iter().any(|o| o.0 >= p.frames.len()) {
            continue;
        }
        let (a, b) = (obs[0], obs[obs.len() - 1]);
        let (ta, tb) = (&p.frames[a.0].pose, &p.frames[b.0].pose);
        let rel = tb.compose(&ta.inverse());
        let Ok(pa) = triangulate(a.1, b.1, &rel, &p.intrinsics) else {
            continue;
        };
        let pw = ta.inverse().transform_point(&pa);
        if obs.iter().any(|(f, _)| p.frames[*f].pose.transform_point(&pw).z <= 0.0) {
            continue;
        }
        let index = p.points.len();
        p.points.push(pw);
        p.point_ids.push(t.id);
        for (f, px) in obs {
            p.observations.push(Observation {
                frame_index: f,
                point_index: index,
                pixel: px,
            });
        }
        added += 1;
    }
    added
}

/// Assembles a window: triangulates `tracks` with the frames' current poses,
/// drops tracks seen in fewer than two frames, and seeds depth scales at 1.
pub fn build_problem(
    intrinsics: CameraIntrinsics,
    mut frames: Vec<WindowFrame>,
    tracks: &[Track],
    anchors: Vec<EdgeAnchor>,
    junctions: Vec<Junction3d>,
    weights: LossWeights,
) -> Result<WindowProblem, BaError> {
    if frames.len() < 2 {
        return Err(BaError::TooFewFrames(frames.len()));
    }
    for f in frames.iter_mut() {
        f.depth_scale = 1.0;
    }
    let mut p = WindowProblem {
        intrinsics,
        frames,
        points: Vec::new(),
        point_ids: Vec::new(),
        observations: Vec::new(),
        anchors,
        junctions,
        weights,
        huber: None,
    };
    let found = add_tracks(&mut p, tracks);
    if found < MIN_POINTS {
        return Err(BaError::InsufficientMatches { found });
    }
    p.update_anchors();
    p.validate()?;
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gauge {
    FixFirstPose,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmConfig {
    /// Initial damping relative to the mean diagonal of `JᵀJ`.
    pub mu_init: f64,
    pub mu_up: f64,
    pub mu_down: f64,
    pub max_iters: usize,
    /// Stop when an accepted step lowers the loss by less than this fraction.
    pub rel_tol: f64,
    /// Stop when the largest gradient entry falls below this.
    pub abs_tol: f64,
    pub gauge: Gauge,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            mu_init: 1e-3,
            mu_up: 10.0,
            mu_down: 1.0 / 3.0,
            max_iters: 50,
            rel_tol: 1e-10,
            abs_tol: 1e-10,
            gauge: Gauge::FixFirstPose,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<(), BaError> {
        if !(self.mu_init > 0.0) || !(self.mu_up > 1.0) || !(self.mu_down > 0.0 && self.mu_down < 1.0) {
            return Err(BaError::Invalid("damping schedule"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    RelativeDecrease,
    Gradient,
    MaxIterations,
    /// Damping exceeded [`MU_MAX`] without a decreasing step.
    NoProgress,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::RelativeDecrease => "relative_decrease",
            Termination::Gradient => "gradient",
            Termination::MaxIterations => "max_iterations",
            Termination::NoProgress => "no_progress",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Loss of the candidate (infinite when it left the valid domain).
    pub loss: f64,
    pub mu: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iterations: Vec<IterationRecord>,
    pub termination: Termination,
    pub cycle_pairs: usize,
    pub cycle_skipped: usize,
}

impl SolveReport {
    /// Losses after each accepted step.
    pub fn accepted_losses(&self) -> Vec<f64> {
        self.iterations.iter().filter(|r| r.accepted).map(|r| r.loss).collect()
    }
}

/// Normal equations split into the camera block and per-point blocks.
struct Normal {
    b: DMatrix<f64>,
    gc: DVector<f64>,
    e: Vec<DMatrix<f64>>,
    c: Vec<Matrix3<f64>>,
    gp: Vec<Vector3<f64>>,
}

fn cam_offset(frame: usize) -> Option<usize> {
    (frame > 0).then(|| (frame - 1) * CAM)
}

fn accumulate(eval: &Evaluation, frames: usize, points: usize) -> Normal {
    let nc = (frames - 1) * CAM;
    let mut n = Normal {
        b: DMatrix::zeros(nc, nc),
        gc: DVector::zeros(nc),
        e: vec![DMatrix::zeros(nc, 3); points],
        c: vec![Matrix3::zeros(); points],
        gp: vec![Vector3::zeros(); points],
    };
    for blk in &eval.blocks {
        let r = blk.residual;
        let cams: Vec<(usize, &SMatrix<f64, 3, 7>)> = blk
            .cameras
            .iter()
            .flatten()
            .filter_map(|(f, m)| cam_offset(*f).map(|o| (o, m)))
            .collect();
        for &(oa, ja) in &cams {
            let g = ja.transpose() * r;
            for i in 0..CAM {
                n.gc[oa + i] -= g[i];
            }
            for &(ob, jb) in &cams {
                let h = ja.transpose() * jb;
                let mut view = n.b.view_mut((oa, ob), (CAM, CAM));
                view += h;
            }
        }
        if let Some((pi, jp)) = &blk.point {
            n.c[*pi] += jp.transpose() * jp;
            n.gp[*pi] -= jp.transpose() * r;
            for &(oa, ja) in &cams {
                let h = ja.transpose() * jp;
                let mut view = n.e[*pi].view_mut((oa, 0), (CAM, 3));
                view += h;
            }
        }
    }
    n
}

impl Normal {
    fn mean_diagonal(&self) -> f64 {
        let mut s = self.b.diagonal().sum();
        let mut count = self.b.nrows();
        for c in &self.c {
            s += c.trace();
            count += 3;
        }
        if count == 0 {
            0.0
        } else {
            s / count as f64
        }
    }

    fn gradient_inf(&self) -> f64 {
        let mut m = self.gc.amax();
        for g in &self.gp {
            m = m.max(g.amax());
        }
        m
    }

    /// Solves `(JᵀJ + μI) δ = −Jᵀr`; `None` if the damped system does not
    /// factor.
    fn solve(&self, mu: f64) -> Option<(DVector<f64>, Vec<Vector3<f64>>)> {
        let nc = self.b.nrows();
        let mut s = self.b.clone();
        for i in 0..nc {
            s[(i, i)] += mu;
        }
        let mut rhs = self.gc.clone();
        let mut cinv = Vec::with_capacity(self.c.len());
        for (k, c) in self.c.iter().enumerate() {
            let ci = (c + Matrix3::identity() * mu).cholesky()?.inverse();
            if nc > 0 {
                let eci = &self.e[k] * ci;
                s -= &eci * self.e[k].transpose();
                rhs -= &eci * self.gp[k];
            }
            cinv.push(ci);
        }
        let s = (&s + s.transpose()) * 0.5;
        let dc = if nc > 0 {
            s.cholesky()?.solve(&rhs)
        } else {
            DVector::zeros(0)
        };
        let dp = cinv
            .iter()
            .enumerate()
            .map(|(k, ci)| {
                let back = if nc > 0 {
                    self.e[k].transpose() * &dc
                } else {
                    DVector::zeros(3)
                };
                ci * (self.gp[k] - Vector3::new(back[0], back[1], back[2]))
            })
            .collect();
        Some((dc, dp))
    }
}

fn apply_step(p: &WindowProblem, dc: &DVector<f64>, dp: &[Vector3<f64>]) -> Option<WindowProblem> {
    let mut q = p.clone();
    for (f, frame) in q.frames.iter_mut().enumerate().skip(1) {
        let o = (f - 1) * CAM;
        let w = Vector3::new(dc[o], dc[o + 1], dc[o + 2]);
        let rho = Vector3::new(dc[o + 3], dc[o + 4], dc[o + 5]);
        frame.pose = frame.pose.retract_left(&w, &rho);
        frame.depth_scale += dc[o + 6];
        if !(frame.depth_scale > 0.0) {
            return None;
        }
    }
    for (pt, d) in q.points.iter_mut().zip(dp) {
        *pt += d;
    }
    Some(q)
}

fn candidate_loss(q: &WindowProblem, pairs: &[CyclePair]) -> f64 {
    match evaluate(q, &q.weights, pairs, false) {
        Ok(e) if e.total.is_finite() => e.total,
        _ => f64::INFINITY,
    }
}

/// Levenberg–Marquardt over the window. Every accepted step strictly lowers
/// the loss; rejected steps raise μ and leave the parameters unchanged. The
/// set of active cycle pairs is fixed at entry.
pub fn lm_solve(p: &WindowProblem, cfg: &LmConfig) -> Result<(WindowProblem, SolveReport), BaError> {
    cfg.validate()?;
    p.validate()?;
    let mut cur = p.clone();
    let (pairs, cycle_skipped) = active_cycle_pairs(&cur);
    let mut eval = evaluate(&cur, &cur.weights, &pairs, true)?;
    if !eval.total.is_finite() {
        return Err(BaError::NonFinite);
    }
    let initial_loss = eval.total;
    let mut loss = eval.total;
    let mut records = Vec::new();
    let mut mu: Option<f64> = None;
    let mut termination = Termination::MaxIterations;
    let mut iteration = 0;

    'outer: while iteration < cfg.max_iters {
        let normal = accumulate(&eval, cur.frames.len(), cur.points.len());
        if normal.gradient_inf() <= cfg.abs_tol {
            termination = Termination::Gradient;
            break;
        }
        let m = *mu.get_or_insert_with(|| {
            let d = normal.mean_diagonal();
            cfg.mu_init * if d > 0.0 { d } else { 1.0 }
        });
        let mut m = m;
        loop {
            if iteration >= cfg.max_iters {
                break 'outer;
            }
            let Some((dc, dp)) = normal.solve(m) else {
                if m >= MU_SINGULAR {
                    return Err(BaError::Singular { mu: m });
                }
                m *= cfg.mu_up;
                continue;
            };
            iteration += 1;
            let cand = apply_step(&cur, &dc, &dp);
            let cand_loss = cand.as_ref().map_or(f64::INFINITY, |q| candidate_loss(q, &pairs));
            if cand_loss < loss {
                records.push(IterationRecord {
                    iteration,
                    loss: cand_loss,
                    mu: m,
                    accepted: true,
                });
                let rel = (loss - cand_loss) / loss;
                cur = cand.expect("finite loss implies a candidate");
                loss = cand_loss;
                mu = Some(m * cfg.mu_down);
                eval = evaluate(&cur, &cur.weights, &pairs, true)?;
                if rel < cfg.rel_tol {
                    termination = Termination::RelativeDecrease;
                    break 'outer;
                }
                break;
            }
            records.push(IterationRecord {
                iteration,
                loss: cand_loss,
                mu: m,
                accepted: false,
            });
            m *= cfg.mu_up;
            if m > MU_MAX {
                termination = Termination::NoProgress;
                break 'outer;
            }
        }
    }
    cur.update_anchors();
    Ok((
        cur,
        SolveReport {
            initial_loss,
            final_loss: loss,
            iterations: records,
            termination,
            cycle_pairs: pairs.len(),
            cycle_skipped,
        },
    ))
}

/// Target share of each component in the adaptive weighting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetShares {
    pub reproj: f64,
    pub cycle: f64,
    pub shape: f64,
}

impl Default for TargetShares {
    fn default() -> Self {
        Self {
            reproj: 1.0,
            cycle: 1.0,
            shape: 1.0,
        }
    }
}

const VARIANCE_FLOOR: f64 = 1e-12;

/// Robust variance `(1.4826 · MAD)²`; `None` for an empty set.
pub fn mad_variance(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let median = |v: &mut Vec<f64>| -> f64 {
        v.sort_by(|a, b| a.total_cmp(b));
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    };
    let mut v = values.to_vec();
    let m = median(&mut v);
    let mut dev: Vec<f64> = values.iter().map(|x| (x - m).abs()).collect();
    let sigma = 1.4826 * median(&mut dev);
    Some(sigma * sigma)
}

/// Inverse-variance weights from per-component residual samples, normalized
/// so the reprojection weight is 1. Empty components get weight 0.
pub fn weights_from_residuals(
    reproj: &[f64],
    cycle: &[f64],
    shape: &[f64],
    shares: &TargetShares,
    base: &LossWeights,
) -> LossWeights {
    let w = |v: &[f64], share: f64| mad_variance(v).map_or(0.0, |var| share / var.max(VARIANCE_FLOOR));
    let (mut r, mut c, mut s) = (w(reproj, shares.reproj), w(cycle, shares.cycle), w(shape, shares.shape));
    if r > 0.0 {
        c /= r;
        s /= r;
        r = 1.0;
    }
    LossWeights {
        lambda_reproj: r,
        lambda_cycle: c,
        lambda_shape: s,
        lambda_theta: base.lambda_theta,
        lambda_col: base.lambda_col,
    }
}

/// Recomputes the component weights from the window's current residuals.
pub fn adaptive_weights(p: &WindowProblem, shares: &TargetShares) -> Result<LossWeights, BaError> {
    let unit = LossWeights {
        lambda_reproj: 1.0,
        lambda_cycle: 1.0,
        lambda_shape: 0.0,
        lambda_theta: 0.0,
        lambda_col: 0.0,
    };
    let mut plain = p.clone();
    plain.huber = None;
    let (pairs, _) = active_cycle_pairs(&plain);
    let e = evaluate(&plain, &unit, &pairs, false)?;
    let mut reproj = Vec::new();
    let mut cycle = Vec::new();
    for b in &e.blocks {
        let dst = match b.component {
            Component::Reprojection => &mut reproj,
            Component::Cycle => &mut cycle,
            _ => continue,
        };
        dst.extend(b.residual.iter().take(b.dim));
    }
    let mut shape = Vec::new();
    let (lt, lc) = (p.weights.lambda_theta.sqrt(), p.weights.lambda_col.sqrt());
    for (i, j) in p.junctions.iter().enumerate() {
        let r = junction_residuals(j, p.frames[j.frame].depth_scale, i)?;
        shape.push(r.angle * lt);
        for o in r.offsets1.iter().chain(r.offsets2.iter()) {
            shape.extend(o.iter().map(|x| x * lc));
        }
    }
    Ok(weights_from_residuals(&reproj, &cycle, &shape, shares, &p.weights))
}

/// What leaves the window when it slides.
#[derive(Debug, Clone, PartialEq)]
pub struct Retired {
    pub frame: WindowFrame,
    /// Points no longer observed by at least two frames, with their ids.
    pub points: Vec<(u64, Point3)>,
    pub anchors: Vec<EdgeAnchor>,
}

/// Drops the oldest frame, appends `frame`, and attaches `links` (existing
/// point id, pixel in the new frame). Points left with fewer than two
/// observations are copied out unchanged. The new oldest frame becomes the
/// gauge at its current estimate, so the window keeps its world frame.
pub fn slide_window(
    p: &WindowProblem,
    frame: WindowFrame,
    links: &[(u64, Pixel)],
) -> Result<(WindowProblem, Retired), BaError> {
    if links.is_empty() {
        return Err(BaError::InsufficientMatches { found: 0 });
    }
    let mut frames: Vec<WindowFrame> = p.frames[1..].to_vec();
    frames.push(frame);
    let new_index = frames.len() - 1;

    let mut obs: Vec<Observation> = p
        .observations
        .iter()
        .filter(|o| o.frame_index > 0)
        .map(|o| Observation {
            frame_index: o.frame_index - 1,
            ..*o
        })
        .collect();
    for &(id, px) in links {
        if let Some(pi) = p.point_ids.iter().position(|&x| x == id) {
            if !obs.iter().any(|o| o.point_index == pi && o.frame_index == new_index) {
                obs.push(Observation {
                    frame_index: new_index,
                    point_index: pi,
                    pixel: px,
                });
            }
        }
    }
    let mut counts = vec![0usize; p.points.len()];
    for o in &obs {
        counts[o.point_index] += 1;
    }
    let mut remap = vec![usize::MAX; p.points.len()];
    let mut points = Vec::new();
    let mut point_ids = Vec::new();
    let mut retired_points = Vec::new();
    for (i, (pt, id)) in p.points.iter().zip(&p.point_ids).enumerate() {
        if counts[i] >= 2 {
            remap[i] = points.len();
            points.push(*pt);
            point_ids.push(*id);
        } else {
            retired_points.push((*id, *pt));
        }
    }
    let observations = obs
        .into_iter()
        .filter(|o| remap[o.point_index] != usize::MAX)
        .map(|o| Observation {
            point_index: remap[o.point_index],
            ..o
        })
        .collect();
    let (old_anchors, kept): (Vec<EdgeAnchor>, Vec<EdgeAnchor>) = p.anchors.iter().partition(|a| a.source_frame == 0);
    let anchors = kept
        .into_iter()
        .map(|a| EdgeAnchor {
            source_frame: a.source_frame - 1,
            ..a
        })
        .collect();
    let junctions = p
        .junctions
        .iter()
        .filter(|j| j.frame > 0)
        .map(|j| Junction3d {
            frame: j.frame - 1,
            ..j.clone()
        })
        .collect();
    let q = WindowProblem {
        intrinsics: p.intrinsics,
        frames,
        points,
        point_ids,
        observations,
        anchors,
        junctions,
        weights: p.weights,
        huber: p.huber,
    };
    Ok((
        q,
        Retired {
            frame: p.frames[0].clone(),
            points: retired_points,
            anchors: old_anchors,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, rot_x, rot_y, so3_exp, so3_log};
    use crate::synthetic::{Plane, Scene};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal as Gaussian};

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(525.0, 525.0, 319.5, 239.5).unwrap()
    }

    /// Oblique zigzag trajectory of world-to-camera poses looking at +z.
    fn truth_pose(i: usize) -> Pose {
        let s = i as f64;
        let center = Vector3::new(0.12 * s, 0.04 * (if i % 2 == 0 { 1.0 } else { -1.0 }), 0.03 * s);
        let r_wc = rot_y(0.02 * s) * rot_x(0.01 * (s * 0.7).sin());
        Pose::from_parts(r_wc.transpose(), -(r_wc.transpose() * center))
    }

    fn scene_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-0.5..1.0),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(3.0..6.0),
                )
            })
            .collect()
    }

    fn tracks_for(poses: &[Pose], pts: &[Point3], noise: f64, rng: &mut ChaCha8Rng) -> Vec<Track> {
        let k = cam();
        let g = Gaussian::new(0.0, noise.max(1e-300)).unwrap();
        pts.iter()
            .enumerate()
            .map(|(i, p)| Track {
                id: i as u64,
                observations: poses
                    .iter()
                    .enumerate()
                    .filter_map(|(f, t)| {
                        let u = project(&k, &t.transform_point(p)).ok()?;
                        let (du, dv) = if noise > 0.0 {
                            (g.sample(rng), g.sample(rng))
                        } else {
                            (0.0, 0.0)
                        };
                        let u = Pixel::new(u.u + du, u.v + dv);
                        (u.u >= 0.0 && u.v >= 0.0 && u.u < 640.0 && u.v < 480.0).then_some((f, u))
                    })
                    .collect(),
            })
            .collect()
    }

    fn perturb(p: &Pose, rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> Pose {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        let dir = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        p.retract_left(&(axis * rot), &(dir * trans))
    }

    fn exact_problem(frames: usize, points: usize, seed: u64) -> (WindowProblem, Vec<Pose>, Vec<Point3>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let poses: Vec<Pose> = (0..frames).map(truth_pose).collect();
        let pts = scene_points(&mut rng, points);
        let tracks = tracks_for(&poses, &pts, 0.0, &mut rng);
        let wf = poses
            .iter()
            .enumerate()
            .map(|(i, p)| WindowFrame::new(i as u64, i as f64, *p, None))
            .collect();
        let p = build_problem(cam(), wf, &tracks, vec![], vec![], LossWeights::reproj_only()).unwrap();
        (p, poses, pts)
    }

    fn pose_errors(a: &[Pose], b: &[Pose]) -> (f64, f64) {
        let mut er: f64 = 0.0;
        let mut et: f64 = 0.0;
        for (x, y) in a.iter().zip(b) {
            er = er.max(so3_log(&(x.rotation * y.rotation.transpose())).norm());
            et = et.max((x.center() - y.center()).norm());
        }
        (er, et)
    }

    /// Maps estimated camera centers and orientations onto the truth with the
    /// best similarity.
    fn gauge_aligned(est: &[Pose], truth: &[Pose]) -> Vec<Pose> {
        let ca: Vec<Point3> = est.iter().map(|p| p.center()).collect();
        let cb: Vec<Point3> = truth.iter().map(|p| p.center()).collect();
        let (s, r, t) = crate::eval::align_similarity(&ca, &cb);
        est.iter()
            .map(|p| {
                let r_wc = r * p.rotation.transpose();
                let c = r * p.center() * s + t;
                Pose::from_parts(r_wc.transpose(), -(r_wc.transpose() * c))
            })
            .collect()
    }

    #[test]
    fn build_exact_two_frames() {
        let (p, _, _) = exact_problem(2, 50, 1);
        assert_eq!(p.points.len(), 50);
        let (l, _) = crate::losses::total_loss(&p, &p.weights).unwrap();
        assert!(l < 1e-12, "{l}");
        assert!(p.frames.iter().all(|f| f.depth_scale == 1.0));
    }

    #[test]
    fn build_without_matches_fails() {
        let wf = vec![
            WindowFrame::new(0, 0.0, truth_pose(0), None),
            WindowFrame::new(1, 1.0, truth_pose(1), None),
        ];
        assert_eq!(
            build_problem(cam(), wf, &[], vec![], vec![], LossWeights::reproj_only()),
            Err(BaError::InsufficientMatches { found: 0 })
        );
    }

    #[test]
    fn build_prunes_orphans() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let poses: Vec<Pose> = (0..5).map(truth_pose).collect();
        let pts = scene_points(&mut rng, 40);
        let mut tracks = tracks_for(&poses, &pts, 0.0, &mut rng);
        // Every third track keeps a single observation.
        for (i, t) in tracks.iter_mut().enumerate() {
            if i % 3 == 0 {
                t.observations.truncate(1);
            }
        }
        let expected = tracks.iter().filter(|t| t.observations.len() >= 2).count();
        let wf = poses
            .iter()
            .enumerate()
            .map(|(i, p)| WindowFrame::new(i as u64, 0.0, *p, None))
            .collect();
        let p = build_problem(cam(), wf, &tracks, vec![], vec![], LossWeights::reproj_only()).unwrap();
        assert_eq!(p.points.len(), expected);
        let mut per_point = vec![0; p.points.len()];
        for o in &p.observations {
            per_point[o.point_index] += 1;
        }
        assert!(per_point.iter().all(|&c| c >= 2));
    }

    #[test]
    fn zero_loss_stops_immediately() {
        let (mut p, _, pts) = exact_problem(3, 30, 3);
        assert_eq!(p.points.len(), pts.len());
        p.points = pts;
        let (q, report) = lm_solve(&p, &LmConfig::default()).unwrap();
        assert!(report.iterations.is_empty());
        assert_eq!(report.termination, Termination::Gradient);
        assert_eq!(q.poses(), p.poses());
        assert_eq!(q.points, p.points);
    }

    #[test]
    fn recovers_perturbed_poses() {
        let (mut p, truth, _) = exact_problem(3, 60, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for f in p.frames.iter_mut().skip(1) {
            f.pose = perturb(&f.pose, &mut rng, 1f64.to_radians(), 0.02);
        }
        let cfg = LmConfig {
            max_iters: 100,
            rel_tol: 1e-14,
            abs_tol: 1e-14,
            ..LmConfig::default()
        };
        let (q, report) = lm_solve(&p, &cfg).unwrap();
        assert!(report.final_loss < 1e-10, "{report:?}");
        let acc = report.accepted_losses();
        assert!(acc.windows(2).all(|w| w[1] < w[0]));
        let (er, et) = pose_errors(&gauge_aligned(&q.poses(), &truth), &truth);
        assert!(er < 1e-4 && et < 1e-4, "{er} {et}");
    }

    #[test]
    fn rejected_steps_raise_mu_and_keep_parameters() {
        let (mut p, _, _) = exact_problem(3, 40, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for f in p.frames.iter_mut().skip(1) {
            f.pose = perturb(&f.pose, &mut rng, 5f64.to_radians(), 0.2);
        }
        let cfg = LmConfig {
            mu_init: 1e-9,
            ..LmConfig::default()
        };
        let (_, report) = lm_solve(&p, &cfg).unwrap();
        let recs = &report.iterations;
        for w in recs.windows(2) {
            if !w[0].accepted {
                assert!((w[1].mu - w[0].mu * cfg.mu_up).abs() <= 1e-12 * w[1].mu);
            }
        }
        let acc = report.accepted_losses();
        let mut prev = report.initial_loss;
        for l in acc {
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn degenerate_planar_pure_rotation_stays_finite() {
        let k = cam();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pts: Vec<Point3> = (0..30)
            .map(|_| Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 4.0))
            .collect();
        let t1 = Pose::from_parts(rot_y(0.05), Vector3::zeros());
        let poses = [Pose::identity(), t1];
        let obs_tracks = tracks_for(&poses, &pts, 0.5, &mut rng);
        let mut p = WindowProblem {
            intrinsics: k,
            frames: poses
                .iter()
                .enumerate()
                .map(|(i, p)| WindowFrame::new(i as u64, 0.0, *p, None))
                .collect(),
            points: pts.clone(),
            point_ids: (0..30).collect(),
            observations: vec![],
            anchors: vec![],
            junctions: vec![],
            weights: LossWeights::reproj_only(),
            huber: None,
        };
        for (i, t) in obs_tracks.iter().enumerate() {
            for &(f, px) in &t.observations {
                p.observations.push(Observation {
                    frame_index: f,
                    point_index: i,
                    pixel: px,
                });
            }
        }
        match lm_solve(&p, &LmConfig::default()) {
            Ok((q, _)) => {
                assert!(q.points.iter().all(|x| x.iter().all(|v| v.is_finite())));
                assert!(q.frames.iter().all(|f| f.pose.rotation.iter().all(|v| v.is_finite())));
            }
            Err(e) => assert!(matches!(e, BaError::Singular { .. })),
        }
    }

    #[test]
    fn gauge_invariance() {
        let (mut p, _, _) = exact_problem(3, 30, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        for o in p.observations.iter_mut() {
            o.pixel.u += rng.random_range(-0.5..0.5);
            o.pixel.v += rng.random_range(-0.5..0.5);
        }
        for f in p.frames.iter_mut().skip(1) {
            f.pose = perturb(&f.pose, &mut rng, 0.01, 0.01);
        }
        let g = Pose::from_parts(so3_exp(&Vector3::new(0.3, -0.2, 0.5)), Vector3::new(1.0, 2.0, -0.5));
        let mut moved = p.clone();
        for f in moved.frames.iter_mut() {
            f.pose = f.pose.compose(&g.inverse());
        }
        for x in moved.points.iter_mut() {
            *x = g.transform_point(x);
        }
        let (a, ra) = lm_solve(&p, &LmConfig::default()).unwrap();
        let (b, rb) = lm_solve(&moved, &LmConfig::default()).unwrap();
        assert!((ra.final_loss - rb.final_loss).abs() <= 1e-9 * ra.final_loss.max(1.0));
        for (x, y) in a.frames.iter().zip(&b.frames) {
            let back = y.pose.compose(&g);
            assert!((back.rotation - x.pose.rotation).norm() < 1e-6);
            assert!((back.translation - x.pose.translation).norm() < 1e-6);
        }
    }

    /// Independent dense objective: Rodrigues-parameterized free poses and
    /// points, reprojection only.
    fn dense_loss(x: &[f64], fixed: &Pose, nf: usize, obs: &[Observation], k: &CameraIntrinsics) -> f64 {
        let pose = |f: usize| -> (Matrix3<f64>, Vector3<f64>) {
            if f == 0 {
                return (fixed.rotation, fixed.translation);
            }
            let o = (f - 1) * 6;
            let w = Vector3::new(x[o], x[o + 1], x[o + 2]);
            let th = w.norm();
            let kx = crate::geometry::skew(&(w / th.max(1e-300)));
            let r = if th < 1e-12 {
                Matrix3::identity()
            } else {
                Matrix3::identity() + kx * th.sin() + kx * kx * (1.0 - th.cos())
            };
            (r, Vector3::new(x[o + 3], x[o + 4], x[o + 5]))
        };
        let base = (nf - 1) * 6;
        let mut s = 0.0;
        for o in obs {
            let (r, t) = pose(o.frame_index);
            let b = base + o.point_index * 3;
            let pc = r * Vector3::new(x[b], x[b + 1], x[b + 2]) + t;
            if pc.z <= 0.0 {
                return f64::INFINITY;
            }
            let du = o.pixel.u - (k.fx * pc.x / pc.z + k.cx);
            let dv = o.pixel.v - (k.fy * pc.y / pc.z + k.cy);
            s += du * du + dv * dv;
        }
        s
    }

    fn gradient_descent(mut x: Vec<f64>, f: &dyn Fn(&[f64]) -> f64) -> f64 {
        let grad = |x: &[f64]| -> Vec<f64> {
            let mut g = vec![0.0; x.len()];
            let mut y = x.to_vec();
            for i in 0..x.len() {
                let h = 1e-7 * (1.0 + x[i].abs());
                y[i] = x[i] + h;
                let a = f(&y);
                y[i] = x[i] - h;
                let b = f(&y);
                y[i] = x[i];
                g[i] = (a - b) / (2.0 * h);
            }
            g
        };
        let mut fx = f(&x);
        let mut g = grad(&x);
        let mut step = 1e-8;
        for _ in 0..20000 {
            let gn: f64 = g.iter().map(|v| v * v).sum();
            if gn < 1e-24 {
                break;
            }
            let mut a = step;
            let mut y: Vec<f64>;
            loop {
                y = x.iter().zip(&g).map(|(xi, gi)| xi - a * gi).collect();
                let fy = f(&y);
                if fy <= fx - 1e-4 * a * gn {
                    fx = fy;
                    break;
                }
                a *= 0.5;
                if a < 1e-30 {
                    return fx;
                }
            }
            let g2 = grad(&y);
            let sv: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
            let yv: Vec<f64> = g2.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy: f64 = sv.iter().zip(&yv).map(|(a, b)| a * b).sum();
            let ss: f64 = sv.iter().map(|v| v * v).sum();
            step = if sy > 0.0 { ss / sy } else { a * 2.0 };
            x = y;
            g = g2;
        }
        fx
    }

    #[test]
    fn matches_brute_force_minimum() {
        let k = cam();
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let poses: Vec<Pose> = (0..3).map(|i| truth_pose(i * 2)).collect();
            let pts = scene_points(&mut rng, 5);
            let tracks = tracks_for(&poses, &pts, 1.0, &mut rng);
            let mut p = WindowProblem {
                intrinsics: k,
                frames: poses
                    .iter()
                    .enumerate()
                    .map(|(i, p)| WindowFrame::new(i as u64, 0.0, *p, None))
                    .collect(),
                points: pts.clone(),
                point_ids: (0..5).collect(),
                observations: vec![],
                anchors: vec![],
                junctions: vec![],
                weights: LossWeights::reproj_only(),
                huber: None,
            };
            for (i, t) in tracks.iter().enumerate() {
                for &(f, px) in &t.observations {
                    p.observations.push(Observation {
                        frame_index: f,
                        point_index: i,
                        pixel: px,
                    });
                }
            }
            let cfg = LmConfig {
                max_iters: 200,
                rel_tol: 1e-15,
                abs_tol: 1e-12,
                ..LmConfig::default()
            };
            let (_, report) = lm_solve(&p, &cfg).unwrap();
            let obs = p.observations.clone();
            let fixed = poses[0];
            let f = |x: &[f64]| dense_loss(x, &fixed, 3, &obs, &k);
            let mut best = f64::INFINITY;
            for start in 0..4 {
                let mut x = Vec::new();
                for pose in &poses[1..] {
                    let q = if start == 0 {
                        *pose
                    } else {
                        perturb(pose, &mut rng, 0.005, 0.005)
                    };
                    x.extend(so3_log(&q.rotation).iter());
                    x.extend(q.translation.iter());
                }
                for pt in &pts {
                    let j = if start == 0 { 0.0 } else { 0.01 };
                    x.extend((pt + Vector3::new(rng.random_range(-j..=j), rng.random_range(-j..=j), 0.0)).iter());
                }
                best = best.min(gradient_descent(x, &f));
            }
            assert!(
                (report.final_loss - best).abs() < 1e-5 || report.final_loss < best,
                "lm {} vs dense {}",
                report.final_loss,
                best
            );
        }
    }

    #[test]
    fn cycle_and_scale_recovered_with_depth() {
        // Depth maps of frame 1 are 5% too deep; the cycle term pulls its
        // depth scale back to 1/1.05.
        let k = cam();
        let plane = Plane::new(Vector3::new(0.05, 0.1, 1.0), 3.5);
        let poses: Vec<Pose> = (0..3).map(truth_pose).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<Point3> = (0..40)
            .map(|_| {
                let px = Pixel::new(rng.random_range(120.0..520.0), rng.random_range(100.0..380.0));
                plane.point_at(&k, &poses[0], px).unwrap()
            })
            .collect();
        let tracks = tracks_for(&poses, &pts, 0.0, &mut rng);
        let wf: Vec<WindowFrame> = poses
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let d = plane.depth_map(&k, p, 640, 480);
                let d = if i == 1 {
                    DepthMap::from_fn(640, 480, |x, y| d.get(x, y).unwrap_or(0.0) * 1.05)
                } else {
                    d
                };
                WindowFrame::new(i as u64, i as f64, *p, Some(Arc::new(d)))
            })
            .collect();
        let mut anchors = Vec::new();
        for (fi, f) in wf.iter().enumerate() {
            for _ in 0..40 {
                let (x, y) = (rng.random_range(150..490), rng.random_range(120..360));
                let d = f.depth.as_ref().unwrap().get(x, y).unwrap();
                anchors.push(EdgeAnchor::new(fi, Pixel::new(x as f64, y as f64), d, &k, &f.pose, 1.0));
            }
        }
        let w = LossWeights {
            lambda_reproj: 1.0,
            lambda_cycle: 1.0,
            lambda_shape: 0.0,
            lambda_theta: 0.0,
            lambda_col: 0.0,
        };
        let p = build_problem(k, wf, &tracks, anchors, vec![], w).unwrap();
        let (q, report) = lm_solve(&p, &LmConfig::default()).unwrap();
        assert!(report.final_loss < report.initial_loss * 1e-3, "{report:?}");
        assert!(
            (q.frames[1].depth_scale - 1.0 / 1.05).abs() < 2e-3,
            "{}",
            q.frames[1].depth_scale
        );
        assert!((q.frames[2].depth_scale - 1.0).abs() < 2e-3);
    }

    #[test]
    fn adaptive_weight_examples() {
        let base = LossWeights::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g1 = Gaussian::new(0.0, 1.0).unwrap();
        let a: Vec<f64> = (0..4001).map(|_| g1.sample(&mut rng)).collect();
        let w = weights_from_residuals(&a, &a, &a, &TargetShares::default(), &base);
        assert_eq!((w.lambda_reproj, w.lambda_cycle, w.lambda_shape), (1.0, 1.0, 1.0));
        let doubled: Vec<f64> = a.iter().map(|x| 2.0 * x).collect();
        let w = weights_from_residuals(&a, &doubled, &[], &TargetShares::default(), &base);
        assert!((w.lambda_cycle - 0.25).abs() < 1e-12);
        assert_eq!(w.lambda_shape, 0.0);
    }

    #[test]
    fn adaptive_weights_from_problem() {
        let (mut p, _, _) = exact_problem(3, 30, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for o in p.observations.iter_mut() {
            o.pixel.u += rng.random_range(-1.0..1.0);
        }
        let w = adaptive_weights(&p, &TargetShares::default()).unwrap();
        assert_eq!(w.lambda_reproj, 1.0);
        assert_eq!(w.lambda_cycle, 0.0);
        assert_eq!(w.lambda_shape, 0.0);
        p.weights = w;
        assert!(lm_solve(&p, &LmConfig::default()).is_ok());
    }

    #[test]
    fn slide_keeps_size_and_retires_copies() {
        let (p, truth, _) = exact_problem(5, 40, 12);
        let k = cam();
        let new_pose = truth_pose(5);
        let links: Vec<(u64, Pixel)> = p
            .point_ids
            .iter()
            .zip(&p.points)
            .filter_map(|(id, x)| project(&k, &new_pose.transform_point(x)).ok().map(|u| (*id, u)))
            .collect();
        let frame = WindowFrame::new(5, 5.0, new_pose, None);
        let (q, retired) = slide_window(&p, frame, &links).unwrap();
        assert_eq!(q.frames.len(), 5);
        assert_eq!(retired.frame.id, 0);
        assert_eq!(q.frames[0].pose, truth[1]);
        for (id, x) in &retired.points {
            let i = p.point_ids.iter().position(|y| y == id).unwrap();
            assert_eq!(*x, p.points[i]);
        }
        for (id, x) in q.point_ids.iter().zip(&q.points) {
            let i = p.point_ids.iter().position(|y| y == id).unwrap();
            assert_eq!(*x, p.points[i]);
        }
        assert!(q.validate().is_ok());
        assert!(slide_window(&p, WindowFrame::new(6, 6.0, new_pose, None), &[]).is_err());
    }

    /// Slides a window of [`DEFAULT_WINDOW`] over 10 frames of a room scene,
    /// each new frame initialized 0.005 rad / 1 cm off its true motion.
    /// Returns the per-frame final estimates.
    fn run_sliding(with_cycle: bool) -> (Vec<Pose>, Vec<Pose>) {
        let k = cam();
        let room = Scene::room(4.0, 2.5, 1.2);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let truth: Vec<Pose> = (0..10).map(truth_pose).collect();
        let pts: Vec<Point3> = (0..300)
            .map(|_| {
                let px = Pixel::new(rng.random_range(-100.0..740.0), rng.random_range(0.0..480.0));
                room.point_at(&k, &truth[0], px).unwrap() * rng.random_range(0.6..0.95)
            })
            .collect();
        let frame_for = |i: usize, pose: Pose, src: usize, rng: &mut ChaCha8Rng| -> (WindowFrame, Vec<EdgeAnchor>) {
            if !with_cycle {
                return (WindowFrame::new(i as u64, i as f64, pose, None), Vec::new());
            }
            let d = Arc::new(room.depth_map(&k, &truth[i], 640, 480));
            let anchors = (0..30)
                .map(|_| {
                    let (x, y) = (rng.random_range(100..540), rng.random_range(80..400));
                    EdgeAnchor::new(
                        src,
                        Pixel::new(x as f64, y as f64),
                        d.get(x, y).unwrap(),
                        &k,
                        &pose,
                        1.0,
                    )
                })
                .collect();
            (WindowFrame::new(i as u64, i as f64, pose, Some(d)), anchors)
        };
        let w = LossWeights {
            lambda_cycle: if with_cycle { 1.0 } else { 0.0 },
            ..LossWeights::reproj_only()
        };
        let mut frames = Vec::new();
        let mut anchors = Vec::new();
        for i in 0..DEFAULT_WINDOW {
            let init = if i == 0 {
                truth[0]
            } else {
                perturb(&truth[i], &mut rng, 0.005, 0.01)
            };
            let (f, a) = frame_for(i, init, i, &mut rng);
            frames.push(f);
            anchors.extend(a);
        }
        let tracks = tracks_for(&truth[..DEFAULT_WINDOW], &pts, 0.0, &mut rng);
        let mut p = build_problem(k, frames, &tracks, anchors, vec![], w).unwrap();
        let cfg = LmConfig {
            max_iters: 100,
            rel_tol: 1e-14,
            abs_tol: 1e-13,
            ..LmConfig::default()
        };
        let mut estimate = Vec::new();
        for next in DEFAULT_WINDOW..=truth.len() {
            let (q, _) = lm_solve(&p, &cfg).unwrap();
            if next == truth.len() {
                estimate.extend(q.poses());
                break;
            }
            estimate.push(q.frames[0].pose);
            let step = truth[next].compose(&truth[next - 1].inverse());
            let init = perturb(&step.compose(&q.frames[q.frames.len() - 1].pose), &mut rng, 0.005, 0.01);
            let (f, a) = frame_for(next, init, DEFAULT_WINDOW - 1, &mut rng);
            let links: Vec<(u64, Pixel)> = q
                .point_ids
                .iter()
                .filter_map(|id| {
                    let u = project(&k, &truth[next].transform_point(&pts[*id as usize])).ok()?;
                    (u.u >= 0.0 && u.v >= 0.0 && u.u < 640.0 && u.v < 480.0).then_some((*id, u))
                })
                .collect();
            let (mut s, _) = slide_window(&q, f, &links).unwrap();
            s.anchors.extend(a);
            let window = &truth[next + 1 - DEFAULT_WINDOW..=next];
            let fresh: Vec<Track> = tracks_for(window, &pts, 0.0, &mut rng)
                .into_iter()
                .filter(|t| !s.point_ids.contains(&t.id) && t.observations.iter().any(|o| o.0 == DEFAULT_WINDOW - 1))
                .collect();
            add_tracks(&mut s, &fresh);
            p = s;
        }
        (estimate, truth)
    }

    #[test]
    fn sliding_sequence_matches_truth() {
        let (est, truth) = run_sliding(false);
        assert_eq!(est.len(), truth.len());
        let (er, et) = pose_errors(&gauge_aligned(&est, &truth), &truth);
        assert!(er < 1e-6 && et < 1e-6, "{er} {et}");
    }

    #[test]
    fn sliding_with_depth_is_metric() {
        // Depth and cycle anchors fix the scale, so no alignment is applied.
        // Bilinear depth sampling is not exact on slanted walls, which
        // biases the optimum at the 1e-5 level. A single plane would not
        // do: a wrong translation scale and a per-frame depth scale then
        // close every cycle exactly.
        let (est, truth) = run_sliding(true);
        let (er, et) = pose_errors(&est, &truth);
        assert!(er < 1e-4 && et < 1e-4, "{er} {et}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn damped_normal_matrix_is_spd(seed in 0u64..1000, mu_exp in -6.0f64..4.0) {
            let (mut p, _, _) = exact_problem(3, 12, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for o in p.observations.iter_mut() {
                o.pixel.v += rng.random_range(-2.0..2.0);
            }
            let e = evaluate(&p, &p.weights, &[], true).unwrap();
            let n = accumulate(&e, 3, p.points.len());
            let nc = n.b.nrows();
            let dim = nc + 3 * p.points.len();
            let mut h = DMatrix::zeros(dim, dim);
            h.view_mut((0, 0), (nc, nc)).copy_from(&n.b);
            for (k, c) in n.c.iter().enumerate() {
                h.view_mut((nc + 3 * k, nc + 3 * k), (3, 3)).copy_from(c);
                h.view_mut((0, nc + 3 * k), (nc, 3)).copy_from(&n.e[k]);
                h.view_mut((nc + 3 * k, 0), (3, nc)).copy_from(&n.e[k].transpose());
            }
            let mu = 10f64.powf(mu_exp) * n.mean_diagonal();
            prop_assert!((&h - h.transpose()).amax() <= 1e-9 * h.amax());
            for i in 0..dim {
                h[(i, i)] += mu;
            }
            prop_assert!(h.cholesky().is_some());
            prop_assert!(n.solve(mu).is_some());
        }
    }
}
