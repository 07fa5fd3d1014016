//! Residuals and losses minimized by the local bundle adjustment:
//! reprojection, edge cycle-consistency and L-shape structure.
//!
//! Poses are world-to-camera. Jacobians are taken w.r.t. the left increment
//! `(ω, ρ)` of [`Pose::retract_left`], the world point, and the per-frame
//! depth scale.

use alloc::vec::Vec;

use nalgebra::{DVector, Matrix2x3, SMatrix, SymmetricEigen, Vector2, Vector3};

use crate::ba::WindowProblem;
use crate::depth::DepthMap;
use crate::features::LShapeJunction;
use crate::geometry::{skew, CameraIntrinsics, Pixel, Point3, Pose, MIN_DEPTH};
use crate::jet::{add3, mat_vec, sub3, transpose, Jet, JetMat3, JetVec3};
#[allow(unused_imports)]
use num_traits::Float;

/// Huber threshold in pixels when robust losses are enabled.
pub const HUBER_DELTA: f64 = 2.0;
/// Distance from the image border a target pixel needs when a cycle pair is
/// activated, so pairs stay valid while the solver moves the poses.
pub const CYCLE_MARGIN: f64 = 8.0;
/// Directions shorter than this are degenerate.
pub const MIN_DIRECTION: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("observation {observation} is behind its camera")]
    BehindCamera { observation: usize },
    #[error("cycle leaves the target image")]
    OutOfBounds,
    #[error("target depth is invalid at the projected pixel")]
    InvalidDepth,
    #[error("cycle point falls behind a camera")]
    CycleBehindCamera,
    #[error("junction {junction} has a degenerate direction")]
    DegenerateDirection { junction: usize },
    #[error("junction {junction} has fewer than 3 points on a segment")]
    InsufficientPoints { junction: usize },
    #[error("loss weights must be non-negative with at least one positive")]
    InvalidWeights,
}

/// Pixel `pixel` of point `point_index` observed in frame `frame_index`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub frame_index: usize,
    pub point_index: usize,
    pub pixel: Pixel,
}

/// Edge pixel with its (unscaled) depth in the source frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeAnchor {
    pub source_frame: usize,
    pub pixel: Pixel,
    pub depth: f64,
    pub point_world: Point3,
}

impl EdgeAnchor {
    /// `t_cw` is the source frame's world-to-camera pose, `scale` its depth
    /// correction.
    pub fn new(source_frame: usize, pixel: Pixel, depth: f64, k: &CameraIntrinsics, t_cw: &Pose, scale: f64) -> Self {
        let mut a = Self {
            source_frame,
            pixel,
            depth,
            point_world: Point3::zeros(),
        };
        a.update_world(k, t_cw, scale);
        a
    }

    pub fn update_world(&mut self, k: &CameraIntrinsics, t_cw: &Pose, scale: f64) {
        self.point_world = t_cw
            .inverse()
            .transform_point(&(k.normalize(self.pixel) * (self.depth * scale)));
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_reproj: f64,
    pub lambda_cycle: f64,
    pub lambda_shape: f64,
    pub lambda_theta: f64,
    pub lambda_col: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_reproj: 1.0,
            lambda_cycle: 1.0,
            lambda_shape: 1.0,
            lambda_theta: 1.0,
            lambda_col: 1.0,
        }
    }
}

impl LossWeights {
    pub fn reproj_only() -> Self {
        Self {
            lambda_reproj: 1.0,
            lambda_cycle: 0.0,
            lambda_shape: 0.0,
            lambda_theta: 0.0,
            lambda_col: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let all = [
            self.lambda_reproj,
            self.lambda_cycle,
            self.lambda_shape,
            self.lambda_theta,
            self.lambda_col,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || all.iter().all(|w| *w == 0.0) {
            return Err(LossError::InvalidWeights);
        }
        Ok(())
    }
}

/// L-shape junction lifted to 3D: segment points in the source camera frame
/// at depth scale 1, ordered from the corner outwards.
#[derive(Debug, Clone, PartialEq)]
pub struct Junction3d {
    pub frame: usize,
    pub expected_angle: f64,
    pub seg1: Vec<Point3>,
    pub seg2: Vec<Point3>,
}

impl Junction3d {
    /// Back-projects each segment pixel with valid depth. `None` unless both
    /// segments keep at least 3 points.
    pub fn from_junction(j: &LShapeJunction, frame: usize, depth: &DepthMap, k: &CameraIntrinsics) -> Option<Self> {
        let lift = |pts: &[Pixel]| -> Vec<Point3> {
            pts.iter()
                .filter_map(|&p| depth.sample(p).ok().flatten().map(|d| k.normalize(p) * d))
                .collect()
        };
        let (seg1, seg2) = (lift(&j.pts1), lift(&j.pts2));
        (seg1.len() >= 3 && seg2.len() >= 3).then(|| Self {
            frame,
            expected_angle: j.expected_angle,
            seg1,
            seg2,
        })
    }

    fn world(&self, t_cw: &Pose, scale: f64) -> (Vec<Point3>, Vec<Point3>) {
        let inv = t_cw.inverse();
        let f = |s: &[Point3]| s.iter().map(|p| inv.transform_point(&(p * scale))).collect();
        (f(&self.seg1), f(&self.seg2))
    }
}

/// Residual component a block belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Reprojection,
    Cycle,
    Angle,
    Collinear,
}

/// An anchor checked against a target frame; frozen for one solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CyclePair {
    pub anchor: usize,
    pub target: usize,
}

/// Unweighted component losses.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ComponentLosses {
    pub reproj: f64,
    pub cycle: f64,
    pub angle: f64,
    pub collinear: f64,
}

impl ComponentLosses {
    pub fn shape(&self, w: &LossWeights) -> f64 {
        w.lambda_theta * self.angle + w.lambda_col * self.collinear
    }

    pub fn total(&self, w: &LossWeights) -> f64 {
        w.lambda_reproj * self.reproj + w.lambda_cycle * self.cycle + w.lambda_shape * self.shape(w)
    }
}

/// Up to 3 weighted residual rows with their Jacobians. Camera Jacobians are
/// 7 columns: `ω`, `ρ`, depth scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub component: Component,
    pub dim: usize,
    pub residual: Vector3<f64>,
    pub cameras: [Option<(usize, SMatrix<f64, 3, 7>)>; 2],
    pub point: Option<(usize, SMatrix<f64, 3, 3>)>,
}

impl ResidualBlock {
    fn new(component: Component, dim: usize) -> Self {
        Self {
            component,
            dim,
            residual: Vector3::zeros(),
            cameras: [None, None],
            point: None,
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.residual.norm_squared()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub blocks: Vec<ResidualBlock>,
    pub components: ComponentLosses,
    pub total: f64,
}

impl Evaluation {
    pub fn stacked(&self) -> DVector<f64> {
        let n: usize = self.blocks.iter().map(|b| b.dim).sum();
        let mut v = DVector::zeros(n);
        let mut row = 0;
        for b in &self.blocks {
            for i in 0..b.dim {
                v[row + i] = b.residual[i];
            }
            row += b.dim;
        }
        v
    }
}

/// `(ρ(‖r‖), s)` with `ρ` the Huber loss and `s` the factor that maps the
/// residual to one whose squared norm is `ρ`.
fn robust(norm: f64, delta: Option<f64>) -> (f64, f64) {
    match delta {
        Some(d) if norm > d => {
            let rho = d * (2.0 * norm - d);
            (rho, rho.sqrt() / norm)
        }
        _ => (norm * norm, 1.0),
    }
}

fn projection_jacobian(k: &CameraIntrinsics, p: &Point3) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * p.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * p.y * iz * iz,
    )
}

fn reprojection_one(
    k: &CameraIntrinsics,
    pose: &Pose,
    point: &Point3,
    pixel: Pixel,
    index: usize,
) -> Result<(Vector2<f64>, Point3), LossError> {
    let pc = pose.transform_point(point);
    if !(pc.z > MIN_DEPTH) {
        return Err(LossError::BehindCamera { observation: index });
    }
    let proj = Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy);
    Ok((pixel.to_vector() - proj, pc))
}

/// Sum of squared pixel residuals and the per-observation residuals.
pub fn reprojection_loss(
    poses: &[Pose],
    points: &[Point3],
    obs: &[Observation],
    k: &CameraIntrinsics,
) -> Result<(f64, Vec<Vector2<f64>>), LossError> {
    let mut residuals = Vec::with_capacity(obs.len());
    let mut loss = 0.0;
    for (i, o) in obs.iter().enumerate() {
        let (r, _) = reprojection_one(k, &poses[o.frame_index], &points[o.point_index], o.pixel, i)?;
        loss += r.norm_squared();
        residuals.push(r);
    }
    Ok((loss, residuals))
}

struct JetPose<const N: usize> {
    r: JetMat3<N>,
    t: JetVec3<N>,
}

/// Pose as jets; with `offset`, variables `offset..offset+6` are the left
/// increment `(ω, ρ)` evaluated at zero.
fn jet_pose<const N: usize>(p: &Pose, offset: Option<usize>) -> JetPose<N> {
    let mut r: JetMat3<N> = core::array::from_fn(|a| core::array::from_fn(|c| Jet::constant(p.rotation[(a, c)])));
    let mut t: JetVec3<N> = core::array::from_fn(|a| Jet::constant(p.translation[a]));
    if let Some(o) = offset {
        for k in 0..3 {
            let e = Vector3::ith(k, 1.0);
            for c in 0..3 {
                let col = e.cross(&p.rotation.column(c).into_owned());
                for a in 0..3 {
                    r[a][c].d[o + k] = col[a];
                }
            }
            let dt = e.cross(&p.translation);
            for a in 0..3 {
                t[a].d[o + k] = dt[a];
            }
            t[k].d[o + 3 + k] = 1.0;
        }
    }
    JetPose { r, t }
}

fn jet_project<const N: usize>(k: &CameraIntrinsics, p: &JetVec3<N>) -> Result<[Jet<N>; 2], LossError> {
    if !(p[2].v > MIN_DEPTH) {
        return Err(LossError::CycleBehindCamera);
    }
    Ok([p[0] / p[2] * k.fx + k.cx, p[1] / p[2] * k.fy + k.cy])
}

/// Round trip `u* → P_i → P_j → u_j → P'_j → P'_i → u'` with world-to-camera
/// poses `ti`, `tj` and depth scales `si`, `sj`; returns `u* − u'`.
#[allow(clippy::too_many_arguments)]
fn cycle_chain<const N: usize>(
    k: &CameraIntrinsics,
    u: Pixel,
    d_i: f64,
    depth_j: &DepthMap,
    ti: &JetPose<N>,
    tj: &JetPose<N>,
    si: Jet<N>,
    sj: Jet<N>,
    margin: f64,
) -> Result<[Jet<N>; 2], LossError> {
    let n = k.normalize(u);
    let zi = si * d_i;
    let p_i = [zi * n.x, zi * n.y, zi];
    let p_w = mat_vec(&transpose(&ti.r), &sub3(&p_i, &ti.t));
    let p_j = add3(&mat_vec(&tj.r, &p_w), &tj.t);
    let u_j = jet_project(k, &p_j)?;
    let px = Pixel::new(u_j[0].v, u_j[1].v);
    let inside = px.u >= margin
        && px.v >= margin
        && px.u <= depth_j.width() as f64 - 1.0 - margin
        && px.v <= depth_j.height() as f64 - 1.0 - margin;
    if !inside {
        return Err(LossError::OutOfBounds);
    }
    let (d, du, dv) = depth_j.sample_with_gradient(px).ok_or(LossError::InvalidDepth)?;
    let mut dj = Jet::constant(d);
    for (i, x) in dj.d.iter_mut().enumerate() {
        *x = du * u_j[0].d[i] + dv * u_j[1].d[i];
    }
    let zj = sj * dj;
    let xj = (u_j[0] - k.cx) * (1.0 / k.fx);
    let yj = (u_j[1] - k.cy) * (1.0 / k.fy);
    let q_j = [zj * xj, zj * yj, zj];
    let q_w = mat_vec(&transpose(&tj.r), &sub3(&q_j, &tj.t));
    let q_i = add3(&mat_vec(&ti.r, &q_w), &ti.t);
    let u2 = jet_project(k, &q_i)?;
    Ok([Jet::constant(u.u) - u2[0], Jet::constant(u.v) - u2[1]])
}

/// Cycle residual `u*_i − u'_i` for relative pose `t_ij` (frame i to j).
pub fn cycle_residual(
    u: Pixel,
    d_i: f64,
    depth_j: &DepthMap,
    t_ij: &Pose,
    k: &CameraIntrinsics,
) -> Result<Vector2<f64>, LossError> {
    if !(d_i > 0.0) {
        return Err(LossError::InvalidDepth);
    }
    let ti = jet_pose::<0>(&Pose::identity(), None);
    let tj = jet_pose::<0>(t_ij, None);
    let r = cycle_chain(
        k,
        u,
        d_i,
        depth_j,
        &ti,
        &tj,
        Jet::constant(1.0),
        Jet::constant(1.0),
        0.0,
    )?;
    Ok(Vector2::new(r[0].v, r[1].v))
}

fn problem_cycle<const N: usize>(
    p: &WindowProblem,
    pair: CyclePair,
    jac: bool,
    margin: f64,
) -> Result<[Jet<N>; 2], LossError> {
    let a = &p.anchors[pair.anchor];
    let (fi, fj) = (&p.frames[a.source_frame], &p.frames[pair.target]);
    let depth_j = fj.depth.as_deref().ok_or(LossError::InvalidDepth)?;
    let (oi, oj) = if jac { (Some(0), Some(6)) } else { (None, None) };
    let (si, sj) = if jac {
        (Jet::variable(fi.depth_scale, 12), Jet::variable(fj.depth_scale, 13))
    } else {
        (Jet::constant(fi.depth_scale), Jet::constant(fj.depth_scale))
    };
    cycle_chain(
        &p.intrinsics,
        a.pixel,
        a.depth,
        depth_j,
        &jet_pose(&fi.pose, oi),
        &jet_pose(&fj.pose, oj),
        si,
        sj,
        margin,
    )
}

/// Anchor/target pairs whose cycle is currently valid, and the number
/// skipped.
pub fn active_cycle_pairs(p: &WindowProblem) -> (Vec<CyclePair>, usize) {
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for (ai, a) in p.anchors.iter().enumerate() {
        for (j, f) in p.frames.iter().enumerate() {
            if j == a.source_frame || f.depth.is_none() {
                continue;
            }
            let pair = CyclePair { anchor: ai, target: j };
            match problem_cycle::<0>(p, pair, false, CYCLE_MARGIN) {
                Ok(_) => pairs.push(pair),
                Err(_) => skipped += 1,
            }
        }
    }
    (pairs, skipped)
}

/// Total-least-squares 3D line: centroid and unit principal direction.
pub fn fit_line(points: &[Point3]) -> (Point3, Vector3<f64>) {
    let c = points.iter().fold(Point3::zeros(), |a, p| a + p) / points.len() as f64;
    let scatter = points.iter().fold(nalgebra::Matrix3::zeros(), |m, p| {
        let d = p - c;
        m + d * d.transpose()
    });
    let eig = SymmetricEigen::new(scatter);
    let i = eig.eigenvalues.imax();
    (c, eig.eigenvectors.column(i).into_owned())
}

fn perpendicular(p: &Point3, c: &Point3, dir: &Vector3<f64>) -> Vector3<f64> {
    let d = p - c;
    d - dir * d.dot(dir)
}

fn segment_direction(seg: &[Point3], junction: usize) -> Result<Vector3<f64>, LossError> {
    if seg.len() < 2 {
        return Err(LossError::InsufficientPoints { junction });
    }
    let v = seg[seg.len() - 1] - seg[0];
    if v.norm() < MIN_DIRECTION {
        return Err(LossError::DegenerateDirection { junction });
    }
    Ok(v)
}

fn junction_cos(seg1: &[Point3], seg2: &[Point3], junction: usize) -> Result<f64, LossError> {
    let v1 = segment_direction(seg1, junction)?;
    let v2 = segment_direction(seg2, junction)?;
    Ok(v1.dot(&v2) / (v1.norm() * v2.norm()))
}

fn mean_sq_distance(seg: &[Point3]) -> f64 {
    let (c, dir) = fit_line(seg);
    seg.iter()
        .map(|p| perpendicular(p, &c, &dir).norm_squared())
        .sum::<f64>()
        / seg.len() as f64
}

/// Unweighted residuals of one junction at depth scale `scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct JunctionResiduals {
    /// `cos θ_proj − cos θ_expected`.
    pub angle: f64,
    /// Perpendicular offsets to each segment's best-fit line, in the source
    /// camera frame. Offsets scale linearly with the depth correction and do
    /// not depend on the pose.
    pub offsets1: Vec<Vector3<f64>>,
    pub offsets2: Vec<Vector3<f64>>,
}

pub fn junction_residuals(j: &Junction3d, scale: f64, index: usize) -> Result<JunctionResiduals, LossError> {
    if j.seg1.len() < 3 || j.seg2.len() < 3 {
        return Err(LossError::InsufficientPoints { junction: index });
    }
    let angle = junction_cos(&j.seg1, &j.seg2, index)? - j.expected_angle.cos();
    let offsets = |seg: &[Point3]| -> Vec<Vector3<f64>> {
        let (c, dir) = fit_line(seg);
        seg.iter().map(|q| perpendicular(q, &c, &dir) * scale).collect()
    };
    Ok(JunctionResiduals {
        angle,
        offsets1: offsets(&j.seg1),
        offsets2: offsets(&j.seg2),
    })
}

/// Mean squared cosine difference over junctions, on world points.
pub fn lshape_angle_loss(junctions: &[Junction3d], poses: &[Pose], scales: &[f64]) -> Result<f64, LossError> {
    if junctions.is_empty() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (i, j) in junctions.iter().enumerate() {
        let (s1, s2) = j.world(&poses[j.frame], scales[j.frame]);
        let r = junction_cos(&s1, &s2, i)? - j.expected_angle.cos();
        acc += r * r;
    }
    Ok(acc / junctions.len() as f64)
}

/// Mean over junctions of the summed per-segment mean squared distances to
/// each segment's best-fit 3D line, on world points.
pub fn lshape_collinear_loss(junctions: &[Junction3d], poses: &[Pose], scales: &[f64]) -> Result<f64, LossError> {
    if junctions.is_empty() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (i, j) in junctions.iter().enumerate() {
        if j.seg1.len() < 3 || j.seg2.len() < 3 {
            return Err(LossError::InsufficientPoints { junction: i });
        }
        let (s1, s2) = j.world(&poses[j.frame], scales[j.frame]);
        acc += mean_sq_distance(&s1) + mean_sq_distance(&s2);
    }
    Ok(acc / junctions.len() as f64)
}

/// Evaluates all weighted residual blocks. Cycle residuals use the frozen
/// `pairs`; a pair that became invalid is an error.
pub fn evaluate(
    p: &WindowProblem,
    w: &LossWeights,
    pairs: &[CyclePair],
    jacobians: bool,
) -> Result<Evaluation, LossError> {
    let k = &p.intrinsics;
    let mut blocks = Vec::new();
    let mut comp = ComponentLosses::default();

    if w.lambda_reproj > 0.0 {
        let sw = w.lambda_reproj.sqrt();
        for (i, o) in p.observations.iter().enumerate() {
            let pose = &p.frames[o.frame_index].pose;
            let (r, pc) = reprojection_one(k, pose, &p.points[o.point_index], o.pixel, i)?;
            let (rho, f) = robust(r.norm(), p.huber);
            comp.reproj += rho;
            let s = sw * f;
            let mut b = ResidualBlock::new(Component::Reprojection, 2);
            b.residual = Vector3::new(r.x * s, r.y * s, 0.0);
            if jacobians {
                let jp = projection_jacobian(k, &pc);
                let mut cam = SMatrix::<f64, 3, 7>::zeros();
                cam.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jp * skew(&pc) * s));
                cam.fixed_view_mut::<2, 3>(0, 3).copy_from(&(-jp * s));
                let mut pt = SMatrix::<f64, 3, 3>::zeros();
                pt.fixed_view_mut::<2, 3>(0, 0).copy_from(&(-jp * pose.rotation * s));
                b.cameras[0] = Some((o.frame_index, cam));
                b.point = Some((o.point_index, pt));
            }
            blocks.push(b);
        }
    }

    if w.lambda_cycle > 0.0 {
        let sw = w.lambda_cycle.sqrt();
        for &pair in pairs {
            let src = p.anchors[pair.anchor].source_frame;
            let mut b = ResidualBlock::new(Component::Cycle, 2);
            let r = if jacobians {
                let r = problem_cycle::<14>(p, pair, true, 0.0)?;
                let mut ci = SMatrix::<f64, 3, 7>::zeros();
                let mut cj = SMatrix::<f64, 3, 7>::zeros();
                for row in 0..2 {
                    for c in 0..6 {
                        ci[(row, c)] = r[row].d[c];
                        cj[(row, c)] = r[row].d[6 + c];
                    }
                    ci[(row, 6)] = r[row].d[12];
                    cj[(row, 6)] = r[row].d[13];
                }
                b.cameras = [Some((src, ci)), Some((pair.target, cj))];
                Vector2::new(r[0].v, r[1].v)
            } else {
                let r = problem_cycle::<0>(p, pair, false, 0.0)?;
                Vector2::new(r[0].v, r[1].v)
            };
            let (rho, f) = robust(r.norm(), p.huber);
            comp.cycle += rho;
            let s = sw * f;
            b.residual = Vector3::new(r.x * s, r.y * s, 0.0);
            for (_, m) in b.cameras.iter_mut().flatten() {
                *m *= s;
            }
            blocks.push(b);
        }
    }

    let n = p.junctions.len();
    if w.lambda_shape > 0.0 && n > 0 {
        for (i, j) in p.junctions.iter().enumerate() {
            let scale = p.frames[j.frame].depth_scale;
            let raw = junction_residuals(j, 1.0, i)?;
            if w.lambda_theta > 0.0 {
                // Angles are invariant to pose and scale: no Jacobian.
                comp.angle += raw.angle * raw.angle / n as f64;
                let mut b = ResidualBlock::new(Component::Angle, 1);
                b.residual[0] = raw.angle * (w.lambda_shape * w.lambda_theta / n as f64).sqrt();
                blocks.push(b);
            }
            if w.lambda_col > 0.0 {
                for seg in [&raw.offsets1, &raw.offsets2] {
                    let m = seg.len() as f64;
                    let s = (w.lambda_shape * w.lambda_col / (n as f64 * m)).sqrt();
                    for r0 in seg.iter() {
                        comp.collinear += (r0 * scale).norm_squared() / (n as f64 * m);
                        let mut b = ResidualBlock::new(Component::Collinear, 3);
                        b.residual = r0 * (scale * s);
                        if jacobians {
                            let mut cam = SMatrix::<f64, 3, 7>::zeros();
                            cam.fixed_view_mut::<3, 1>(0, 6).copy_from(&(r0 * s));
                            b.cameras[0] = Some((j.frame, cam));
                        }
                        blocks.push(b);
                    }
                }
            }
        }
    }

    let total = blocks.iter().map(|b| b.squared_norm()).sum();
    Ok(Evaluation {
        blocks,
        components: comp,
        total,
    })
}

/// Weighted total loss and the stacked residual whose squared norm equals it.
pub fn total_loss(p: &WindowProblem, w: &LossWeights) -> Result<(f64, DVector<f64>), LossError> {
    w.validate()?;
    let (pairs, _) = active_cycle_pairs(p);
    let e = evaluate(p, w, &pairs, false)?;
    Ok((e.total, e.stacked()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ba::WindowFrame;
    use crate::geometry::{project, rot_x, rot_y, rot_z, so3_exp};
    use crate::synthetic::Plane;
    use alloc::sync::Arc;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(525.0, 525.0, 319.5, 239.5).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> Pose {
        let w = Vector3::new(
            rng.random_range(-rot..rot),
            rng.random_range(-rot..rot),
            rng.random_range(-rot..rot),
        );
        let t = Vector3::new(
            rng.random_range(-trans..trans),
            rng.random_range(-trans..trans),
            rng.random_range(-trans..trans),
        );
        Pose::from_parts(so3_exp(&w), t)
    }

    fn naive_reprojection(poses: &[Pose], points: &[Point3], obs: &[Observation], k: &CameraIntrinsics) -> f64 {
        let mut s = 0.0;
        for o in obs {
            let (r, t, p) = (
                &poses[o.frame_index].rotation,
                &poses[o.frame_index].translation,
                &points[o.point_index],
            );
            let x = r[(0, 0)] * p[0] + r[(0, 1)] * p[1] + r[(0, 2)] * p[2] + t[0];
            let y = r[(1, 0)] * p[0] + r[(1, 1)] * p[1] + r[(1, 2)] * p[2] + t[1];
            let z = r[(2, 0)] * p[0] + r[(2, 1)] * p[1] + r[(2, 2)] * p[2] + t[2];
            let du = o.pixel.u - (k.fx * x / z + k.cx);
            let dv = o.pixel.v - (k.fy * y / z + k.cy);
            s += du * du + dv * dv;
        }
        s
    }

    /// Window over a slanted plane with tracks, anchors and junctions.
    fn planar_problem(seed: u64, frames: usize) -> WindowProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = cam();
        let plane = Plane::new(Vector3::new(0.1, -0.05, 1.0), 3.0);
        let mut wf = Vec::new();
        for i in 0..frames {
            let pose = if i == 0 {
                Pose::identity()
            } else {
                random_pose(&mut rng, 0.03, 0.15)
            };
            let depth = Arc::new(plane.depth_map(&k, &pose, 640, 480));
            wf.push(WindowFrame {
                id: i as u64,
                timestamp: i as f64,
                pose,
                depth_scale: 1.0 + rng.random_range(-0.05..0.05),
                depth: Some(depth),
            });
        }
        let mut points = Vec::new();
        let mut observations = Vec::new();
        for pi in 0..30 {
            let px = Pixel::new(rng.random_range(150.0..490.0), rng.random_range(120.0..360.0));
            let pw = plane.point_at(&k, &wf[0].pose, px).unwrap() + Vector3::new(0.0, 0.0, rng.random_range(-0.3..0.3));
            points.push(pw);
            for (fi, f) in wf.iter().enumerate() {
                let u = project(&k, &f.pose.transform_point(&pw)).unwrap();
                let noise = Pixel::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                observations.push(Observation {
                    frame_index: fi,
                    point_index: pi,
                    pixel: Pixel::new(u.u + noise.u, u.v + noise.v),
                });
            }
        }
        let mut anchors = Vec::new();
        for fi in 0..frames {
            for _ in 0..15 {
                let px = Pixel::new(rng.random_range(200.0..440.0), rng.random_range(150.0..330.0));
                let d = wf[fi].depth.as_ref().unwrap().sample(px).unwrap().unwrap();
                anchors.push(EdgeAnchor::new(fi, px, d, &k, &wf[fi].pose, wf[fi].depth_scale));
            }
        }
        let mut junctions = Vec::new();
        for _ in 0..4 {
            let f = rng.random_range(0..frames);
            let seg = |rng: &mut ChaCha8Rng, dir: Vector3<f64>| -> Vec<Point3> {
                let c = Vector3::new(0.1, -0.1, 2.5);
                (0..6)
                    .map(|i| {
                        let j = Vector3::new(rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01), 0.0);
                        c + dir * (0.05 * i as f64) + j
                    })
                    .collect()
            };
            junctions.push(Junction3d {
                frame: f,
                expected_angle: rng.random_range(1.2..1.9),
                seg1: seg(&mut rng, Vector3::new(1.0, 0.2, 0.1)),
                seg2: seg(&mut rng, Vector3::new(-0.1, 1.0, 0.3)),
            });
        }
        WindowProblem {
            intrinsics: k,
            frames: wf,
            point_ids: (0..points.len() as u64).collect(),
            points,
            observations,
            anchors,
            junctions,
            weights: LossWeights::default(),
            huber: None,
        }
    }

    #[test]
    fn exact_projections_give_zero() {
        let p = planar_problem(1, 3);
        let k = cam();
        let poses: Vec<Pose> = p.frames.iter().map(|f| f.pose).collect();
        let obs: Vec<Observation> = p
            .observations
            .iter()
            .map(|o| Observation {
                pixel: project(&k, &poses[o.frame_index].transform_point(&p.points[o.point_index])).unwrap(),
                ..*o
            })
            .collect();
        let (l, r) = reprojection_loss(&poses, &p.points, &obs, &k).unwrap();
        assert!(l < 1e-18);
        assert_eq!(r.len(), obs.len());
    }

    #[test]
    fn offset_three_four_gives_25() {
        let k = cam();
        let pt = Point3::new(0.2, -0.1, 2.0);
        let u = project(&k, &pt).unwrap();
        let obs = [Observation {
            frame_index: 0,
            point_index: 0,
            pixel: Pixel::new(u.u + 3.0, u.v + 4.0),
        }];
        let (l, r) = reprojection_loss(&[Pose::identity()], &[pt], &obs, &k).unwrap();
        assert!((l - 25.0).abs() < 1e-9);
        assert!((r[0] - Vector2::new(3.0, 4.0)).norm() < 1e-9);
    }

    #[test]
    fn reprojection_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = cam();
        let poses: Vec<Pose> = (0..10).map(|_| random_pose(&mut rng, 0.1, 0.2)).collect();
        let points: Vec<Point3> = (0..50)
            .map(|_| {
                Point3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(3.0..6.0),
                )
            })
            .collect();
        let mut obs = Vec::new();
        for f in 0..10 {
            for p in 0..50 {
                obs.push(Observation {
                    frame_index: f,
                    point_index: p,
                    pixel: Pixel::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
                });
            }
        }
        let (l, _) = reprojection_loss(&poses, &points, &obs, &k).unwrap();
        let n = naive_reprojection(&poses, &points, &obs, &k);
        assert!((l - n).abs() <= 1e-12 * n);
    }

    #[test]
    fn behind_camera_names_observation() {
        let k = cam();
        let pts = [Point3::new(0.0, 0.0, 2.0), Point3::new(0.0, 0.0, -1.0)];
        let obs = [
            Observation {
                frame_index: 0,
                point_index: 0,
                pixel: Pixel::new(319.5, 239.5),
            },
            Observation {
                frame_index: 0,
                point_index: 1,
                pixel: Pixel::new(319.5, 239.5),
            },
        ];
        assert_eq!(
            reprojection_loss(&[Pose::identity()], &pts, &obs, &k),
            Err(LossError::BehindCamera { observation: 1 })
        );
    }

    #[test]
    fn cycle_closes_on_consistent_depth() {
        let k = cam();
        let plane = Plane::new(Vector3::new(0.2, 0.1, 1.0), 2.5);
        let pose_j = Pose::from_parts(rot_y(0.05) * rot_x(-0.02), Vector3::new(-0.1, 0.02, 0.03));
        let depth_i = plane.depth_map(&k, &Pose::identity(), 640, 480);
        let depth_j = plane.depth_map(&k, &pose_j, 640, 480);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            // Integer anchor pixels carry exact depth; the target sample is
            // bilinear, so compare against the target's own interpolation
            // error budget.
            let u = Pixel::new(rng.random_range(100..540) as f64, rng.random_range(100..380) as f64);
            let d = depth_i.get(u.u as usize, u.v as usize).unwrap();
            let r = cycle_residual(u, d, &depth_j, &pose_j, &k).unwrap();
            assert!(r.norm() < 1e-3, "{r}");
        }
    }

    #[test]
    fn cycle_closes_exactly_on_fronto_parallel_plane() {
        // Depth linear in pixels (fronto-parallel plane, pure translation)
        // makes bilinear sampling exact.
        let k = cam();
        let t = Pose::from_translation(Vector3::new(-0.1, 0.05, 0.0));
        let depth = DepthMap::from_fn(640, 480, |_, _| 2.0);
        for u in [
            Pixel::new(320.0, 240.0),
            Pixel::new(101.3, 57.9),
            Pixel::new(600.2, 430.7),
        ] {
            let r = cycle_residual(u, 2.0, &depth, &t, &k).unwrap();
            assert!(r.norm() < 1e-9);
        }
    }

    #[test]
    fn identity_cycle_is_exactly_zero() {
        let k = cam();
        let depth = DepthMap::from_fn(640, 480, |x, y| 1.0 + 0.001 * (x + 2 * y) as f64);
        let u = Pixel::new(200.0, 100.0);
        let d = depth.get(200, 100).unwrap();
        let r = cycle_residual(u, d, &depth, &Pose::identity(), &k).unwrap();
        assert_eq!(r, Vector2::zeros());
    }

    #[test]
    fn perturbed_target_depth_matches_planar_closed_form() {
        // Plane at Z = 2, camera j shifted 10 cm sideways, target depth +10%:
        // u' − u* = fx·b·(1/(1.1 Z) − 1/Z) along u, zero along v.
        let k = cam();
        let (z, b) = (2.0, 0.1);
        let t = Pose::from_translation(Vector3::new(-b, 0.0, 0.0));
        let depth_j = DepthMap::from_fn(640, 480, |_, _| 1.1 * z);
        let expected = k.fx * b * (1.0 / z - 1.0 / (1.1 * z));
        for u in [Pixel::new(320.0, 240.0), Pixel::new(150.5, 90.25)] {
            let r = cycle_residual(u, z, &depth_j, &t, &k).unwrap();
            assert!((r.x - expected).abs() < 1e-9, "{} vs {expected}", r.x);
            assert!(r.y.abs() < 1e-9);
        }
    }

    /// Closed form for a fronto-parallel plane at depth `z` in frame i, true
    /// motion `(−b, 0, 0)` and the relative pose perturbed by `δ` along the
    /// optical axis (the target depth map stays at `z`).
    fn axial_closed_form(k: &CameraIntrinsics, u: Pixel, z: f64, b: f64, delta: f64) -> Vector2<f64> {
        let n = k.normalize(u);
        let (xj, yj) = ((z * n.x - b) / (z + delta), z * n.y / (z + delta));
        let (x2, y2) = ((z * xj + b) / (z - delta), z * yj / (z - delta));
        Vector2::new(k.fx * (n.x - x2), k.fy * (n.y - y2))
    }

    #[test]
    fn translation_perturbation_matches_closed_form() {
        // A sideways error leaves this cycle closed; an axial one does not.
        let k = cam();
        let (z, b, delta) = (2.0, 0.1, 0.01);
        let depth_j = DepthMap::from_fn(640, 480, |_, _| z);
        let t = Pose::from_translation(Vector3::new(-b, 0.0, delta));
        let sideways = Pose::from_translation(Vector3::new(-b + delta, 0.0, 0.0));
        let (mut loss, mut oracle) = (0.0, 0.0);
        for y in (40..440).step_by(40) {
            for x in (60..580).step_by(40) {
                let u = Pixel::new(x as f64 + 0.25, y as f64 + 0.5);
                let r = cycle_residual(u, z, &depth_j, &t, &k).unwrap();
                let e = axial_closed_form(&k, u, z, b, delta);
                assert!((r - e).norm() <= 1e-9 * e.norm().max(1.0));
                loss += r.norm_squared();
                oracle += e.norm_squared();
                assert!(cycle_residual(u, z, &depth_j, &sideways, &k).unwrap().norm() < 1e-9);
            }
        }
        assert!(loss > 0.0);
        assert!((loss - oracle).abs() <= 1e-6 * oracle);
    }

    #[test]
    fn cycle_errors() {
        let k = cam();
        let far = Pose::from_translation(Vector3::new(-5.0, 0.0, 0.0));
        let depth = DepthMap::from_fn(640, 480, |_, _| 2.0);
        assert_eq!(
            cycle_residual(Pixel::new(320.0, 240.0), 2.0, &depth, &far, &k),
            Err(LossError::OutOfBounds)
        );
        let holes = DepthMap::from_fn(640, 480, |_, _| 0.0);
        let near = Pose::from_translation(Vector3::new(-0.01, 0.0, 0.0));
        assert_eq!(
            cycle_residual(Pixel::new(320.0, 240.0), 2.0, &holes, &near, &k),
            Err(LossError::InvalidDepth)
        );
    }

    fn right_corner() -> Junction3d {
        let c = Point3::new(0.0, 0.0, 2.0);
        Junction3d {
            frame: 0,
            expected_angle: core::f64::consts::FRAC_PI_2,
            seg1: (0..5).map(|i| c + Vector3::new(0.02 * i as f64, 0.0, 0.0)).collect(),
            seg2: (0..5)
                .map(|i| c + Vector3::new(0.0, 0.02 * i as f64, 0.01 * i as f64))
                .collect(),
        }
    }

    #[test]
    fn right_angle_corner_zero_loss() {
        let j = [right_corner()];
        let l = lshape_angle_loss(&j, &[Pose::identity()], &[1.0]).unwrap();
        assert!(l < 1e-12);
        assert!(lshape_collinear_loss(&j, &[Pose::identity()], &[1.0]).unwrap() < 1e-12);
    }

    #[test]
    fn sixty_versus_ninety_gives_quarter() {
        let c = Point3::new(0.0, 0.0, 2.0);
        let d2 = Vector3::new(0.5, 3f64.sqrt() / 2.0, 0.0);
        let j = Junction3d {
            frame: 0,
            expected_angle: core::f64::consts::FRAC_PI_2,
            seg1: (0..4).map(|i| c + Vector3::new(0.1 * i as f64, 0.0, 0.0)).collect(),
            seg2: (0..4).map(|i| c + d2 * (0.1 * i as f64)).collect(),
        };
        let l = lshape_angle_loss(&[j], &[Pose::identity()], &[1.0]).unwrap();
        assert!((l - 0.25).abs() < 1e-12);
    }

    #[test]
    fn angle_loss_matches_naive_loop() {
        let p = planar_problem(11, 3);
        let poses: Vec<Pose> = p.frames.iter().map(|f| f.pose).collect();
        let scales: Vec<f64> = p.frames.iter().map(|f| f.depth_scale).collect();
        let l = lshape_angle_loss(&p.junctions, &poses, &scales).unwrap();
        let mut naive = 0.0;
        for j in &p.junctions {
            let a = j.seg1[j.seg1.len() - 1] - j.seg1[0];
            let b = j.seg2[j.seg2.len() - 1] - j.seg2[0];
            let cos = (a.x * b.x + a.y * b.y + a.z * b.z)
                / ((a.x * a.x + a.y * a.y + a.z * a.z).sqrt() * (b.x * b.x + b.y * b.y + b.z * b.z).sqrt());
            naive += (cos - j.expected_angle.cos()).powi(2);
        }
        naive /= p.junctions.len() as f64;
        assert!((l - naive).abs() < 1e-12);
    }

    /// Best-fit line by brute force over directions on a fine sphere grid,
    /// then polished by power iteration on the scatter matrix.
    fn oracle_mean_sq(seg: &[Point3]) -> f64 {
        let n = seg.len() as f64;
        let c = seg.iter().fold(Point3::zeros(), |a, p| a + p) / n;
        let cost = |d: &Vector3<f64>| -> f64 {
            seg.iter()
                .map(|p| {
                    let q = p - c;
                    (q - d * q.dot(d)).norm_squared()
                })
                .sum::<f64>()
                / n
        };
        let mut best = (f64::INFINITY, Vector3::x());
        for i in 0..200 {
            for j in 0..400 {
                let th = core::f64::consts::PI * i as f64 / 200.0;
                let ph = core::f64::consts::TAU * j as f64 / 400.0;
                let d = Vector3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos());
                let e = cost(&d);
                if e < best.0 {
                    best = (e, d);
                }
            }
        }
        let mut d = best.1;
        for _ in 0..200 {
            let mut next = Vector3::zeros();
            for p in seg {
                let q = p - c;
                next += q * q.dot(&d);
            }
            d = next.normalize();
        }
        cost(&d)
    }

    #[test]
    fn displaced_point_matches_refit_oracle() {
        let c = Point3::new(0.1, 0.0, 2.0);
        let mut j = right_corner();
        j.seg1 = (0..5).map(|i| c + Vector3::new(0.1 * i as f64, 0.0, 0.0)).collect();
        j.seg2 = (0..5).map(|i| c + Vector3::new(0.0, 0.1 * i as f64, 0.0)).collect();
        j.seg1[2].y += 0.1;
        let l = lshape_collinear_loss(&[j.clone()], &[Pose::identity()], &[1.0]).unwrap();
        let expected = oracle_mean_sq(&j.seg1) + oracle_mean_sq(&j.seg2);
        assert!(l > 1e-4);
        assert!((l - expected).abs() < 1e-10, "{l} vs {expected}");
    }

    #[test]
    fn shape_losses_rigid_invariant() {
        let p = planar_problem(5, 3);
        let poses: Vec<Pose> = p.frames.iter().map(|f| f.pose).collect();
        let scales: Vec<f64> = p.frames.iter().map(|f| f.depth_scale).collect();
        let g = Pose::from_parts(rot_z(0.7) * rot_x(0.3), Vector3::new(3.0, -1.0, 2.0));
        // Moving the world by g changes each world-to-camera pose to T g⁻¹.
        let moved: Vec<Pose> = poses.iter().map(|t| t.compose(&g.inverse())).collect();
        let a0 = lshape_angle_loss(&p.junctions, &poses, &scales).unwrap();
        let a1 = lshape_angle_loss(&p.junctions, &moved, &scales).unwrap();
        let c0 = lshape_collinear_loss(&p.junctions, &poses, &scales).unwrap();
        let c1 = lshape_collinear_loss(&p.junctions, &moved, &scales).unwrap();
        assert!((a0 - a1).abs() <= 1e-12 * a0.max(1e-12));
        assert!((c0 - c1).abs() <= 1e-12 * c0.max(1e-12) + 1e-18);
    }

    #[test]
    fn degenerate_and_short_segments() {
        let mut j = right_corner();
        j.seg2 = vec![j.seg2[0]; 4];
        assert_eq!(
            lshape_angle_loss(&[j.clone()], &[Pose::identity()], &[1.0]),
            Err(LossError::DegenerateDirection { junction: 0 })
        );
        j = right_corner();
        j.seg1.truncate(2);
        assert_eq!(
            lshape_collinear_loss(&[j], &[Pose::identity()], &[1.0]),
            Err(LossError::InsufficientPoints { junction: 0 })
        );
    }

    fn independent_components(p: &WindowProblem) -> (f64, f64, f64, f64) {
        let poses: Vec<Pose> = p.frames.iter().map(|f| f.pose).collect();
        let scales: Vec<f64> = p.frames.iter().map(|f| f.depth_scale).collect();
        let r = naive_reprojection(&poses, &p.points, &p.observations, &p.intrinsics);
        let mut c = 0.0;
        for a in &p.anchors {
            for (j, f) in p.frames.iter().enumerate() {
                if j == a.source_frame {
                    continue;
                }
                // T_ij with depth scales folded into the depths.
                let ti = &poses[a.source_frame];
                let tij = poses[j].compose(&ti.inverse());
                let dj = DepthMap::from_fn(640, 480, |x, y| {
                    f.depth.as_ref().unwrap().get(x, y).unwrap_or(0.0) * f.depth_scale
                });
                if let Ok(res) = cycle_residual(a.pixel, a.depth * scales[a.source_frame], &dj, &tij, &p.intrinsics) {
                    c += res.norm_squared();
                }
            }
        }
        let ang = lshape_angle_loss(&p.junctions, &poses, &scales).unwrap();
        let col = lshape_collinear_loss(&p.junctions, &poses, &scales).unwrap();
        (r, c, ang, col)
    }

    #[test]
    fn total_loss_is_weighted_sum() {
        let mut p = planar_problem(21, 3);
        let (r, c, a, col) = independent_components(&p);
        assert!(r > 0.0 && c > 0.0 && a > 0.0 && col > 0.0);
        let w = LossWeights {
            lambda_reproj: 2.0,
            lambda_cycle: 3.0,
            lambda_shape: 5.0,
            lambda_theta: 0.7,
            lambda_col: 1.3,
        };
        p.weights = w;
        let (l, v) = total_loss(&p, &w).unwrap();
        let expected = 2.0 * r + 3.0 * c + 5.0 * (0.7 * a + 1.3 * col);
        assert!((l - expected).abs() <= 1e-9 * expected, "{l} vs {expected}");
        assert!((v.norm_squared() - l).abs() <= 1e-12 * l);
    }

    #[test]
    fn reprojection_only_weights() {
        let p = planar_problem(2, 3);
        let poses: Vec<Pose> = p.frames.iter().map(|f| f.pose).collect();
        let (l, _) = total_loss(&p, &LossWeights::reproj_only()).unwrap();
        let (r, _) = reprojection_loss(&poses, &p.points, &p.observations, &p.intrinsics).unwrap();
        assert!((l - r).abs() <= 1e-12 * r);
    }

    #[test]
    fn all_components_zero() {
        let mut p = planar_problem(4, 2);
        let k = p.intrinsics;
        for o in p.observations.iter_mut() {
            o.pixel = project(
                &k,
                &p.frames[o.frame_index].pose.transform_point(&p.points[o.point_index]),
            )
            .unwrap();
        }
        p.anchors.clear();
        p.junctions = vec![right_corner()];
        let (l, v) = total_loss(&p, &LossWeights::default()).unwrap();
        assert!(l < 1e-18 && v.norm() < 1e-9);
    }

    #[test]
    fn invalid_weights_rejected() {
        let p = planar_problem(4, 2);
        let zero = LossWeights {
            lambda_reproj: 0.0,
            lambda_cycle: 0.0,
            lambda_shape: 0.0,
            lambda_theta: 0.0,
            lambda_col: 0.0,
        };
        assert_eq!(total_loss(&p, &zero), Err(LossError::InvalidWeights));
        let neg = LossWeights {
            lambda_cycle: -1.0,
            ..LossWeights::default()
        };
        assert_eq!(total_loss(&p, &neg), Err(LossError::InvalidWeights));
    }

    #[test]
    fn huber_caps_large_residuals() {
        let mut p = planar_problem(8, 2);
        p.anchors.clear();
        p.junctions.clear();
        p.observations[0].pixel.u += 50.0;
        let (raw, _) = total_loss(&p, &LossWeights::reproj_only()).unwrap();
        p.huber = Some(HUBER_DELTA);
        let (rob, v) = total_loss(&p, &LossWeights::reproj_only()).unwrap();
        assert!(rob < raw - 1000.0);
        assert!((v.norm_squared() - rob).abs() <= 1e-12 * rob);
    }

    fn loss_at(p: &WindowProblem, pairs: &[CyclePair]) -> DVector<f64> {
        evaluate(p, &p.weights, pairs, false).unwrap().stacked()
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], what: &str) {
        let na: f64 = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: f64 = analytic
            .iter()
            .zip(numeric)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(diff <= 1e-4 * na.max(1e-6), "{what}: diff {diff} vs norm {na}");
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let p0 = planar_problem(31, 3);
        let (pairs, _) = active_cycle_pairs(&p0);
        assert!(pairs.len() > 50);
        let e = evaluate(&p0, &p0.weights, &pairs, true).unwrap();
        let h = 1e-6;
        let nrows: usize = e.blocks.iter().map(|b| b.dim).sum();
        let columns = |f: &dyn Fn(&mut WindowProblem, f64)| -> alloc::vec::Vec<f64> {
            let mut a = p0.clone();
            let mut b = p0.clone();
            f(&mut a, h);
            f(&mut b, -h);
            let (ra, rb) = (loss_at(&a, &pairs), loss_at(&b, &pairs));
            (0..nrows).map(|i| (ra[i] - rb[i]) / (2.0 * h)).collect()
        };
        let analytic = |frame: Option<usize>, point: Option<usize>, col: usize| -> alloc::vec::Vec<f64> {
            let mut out = alloc::vec::Vec::with_capacity(nrows);
            for b in &e.blocks {
                for r in 0..b.dim {
                    let mut v = 0.0;
                    if let Some(f) = frame {
                        for (fi, m) in b.cameras.iter().flatten() {
                            if *fi == f {
                                v += m[(r, col)];
                            }
                        }
                    }
                    if let (Some(pi), Some((bi, m))) = (point, &b.point) {
                        if *bi == pi {
                            v += m[(r, col)];
                        }
                    }
                    out.push(v);
                }
            }
            out
        };
        for f in 0..3 {
            for c in 0..6 {
                let num = columns(&|q: &mut WindowProblem, s: f64| {
                    let mut inc = [0.0; 6];
                    inc[c] = s;
                    let pose = q.frames[f].pose;
                    q.frames[f].pose = pose.retract_left(
                        &Vector3::new(inc[0], inc[1], inc[2]),
                        &Vector3::new(inc[3], inc[4], inc[5]),
                    );
                });
                assert_close(&analytic(Some(f), None, c), &num, "pose");
            }
            let num = columns(&|q: &mut WindowProblem, s: f64| q.frames[f].depth_scale += s);
            assert_close(&analytic(Some(f), None, 6), &num, "scale");
        }
        for pi in [0, 7, 19] {
            for c in 0..3 {
                let num = columns(&|q: &mut WindowProblem, s: f64| q.points[pi][c] += s);
                assert_close(&analytic(None, Some(pi), c), &num, "point");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn stacked_norm_equals_loss(seed in 0u64..10_000, huber in proptest::bool::ANY) {
            let mut p = planar_problem(seed, 3);
            p.huber = huber.then_some(HUBER_DELTA);
            let (l, v) = total_loss(&p, &p.weights).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert!((v.norm_squared() - l).abs() <= 1e-12 * l.max(1e-300));
        }
    }
}
