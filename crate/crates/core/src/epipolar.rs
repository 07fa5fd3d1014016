//! Two-view geometry: essential matrix estimation with RANSAC, decomposition
//! into a relative pose and two-view triangulation.
//!
//! Relative poses map frame `i` coordinates into frame `j`
//! (`P_j = R P_i + t`), so the epipolar constraint reads `x_jᵀ E x_i = 0` with
//! `E = [t]ₓ R` on normalized image coordinates.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, Matrix3, Matrix4, SMatrix, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{skew, CameraIntrinsics, Pixel, Point3, Pose};
#[allow(unused_imports)]
use num_traits::Float;

/// Sample size of the eight-point solver.
pub const MIN_MATCHES: usize = 8;
/// Minimum ray angle accepted by [`triangulate`], degrees.
pub const MIN_PARALLAX_DEG: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum EpipolarError {
    #[error("need at least {MIN_MATCHES} matches, got {found}")]
    InsufficientMatches { found: usize },
    #[error("degenerate configuration: best model has {inliers} inliers")]
    Degenerate { inliers: usize },
    #[error("correspondences are explained by a pure rotation; translation is unobservable")]
    PureRotation,
    #[error("fundamental matrix has rank 3 (σ₃/σ₁ = {ratio:e})")]
    RankThree { ratio: f64 },
    #[error("matrix is zero")]
    ZeroMatrix,
    #[error("no decomposition puts more than half the points in front of both cameras ({best} of {total})")]
    CheiralityAmbiguous { best: usize, total: usize },
    #[error("rays are nearly parallel ({angle_deg:.4}°)")]
    LowParallax { angle_deg: f64 },
    #[error("triangulated point lies behind a camera")]
    BehindCamera,
}

/// Essential matrix normalized to unit Frobenius norm, sign fixed so that
/// the largest-magnitude entry is positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssentialMatrix {
    m: Matrix3<f64>,
}

impl EssentialMatrix {
    /// Projects `m` onto the essential manifold and normalizes it.
    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Self, EpipolarError> {
        let e = project_to_essential(m).ok_or(EpipolarError::ZeroMatrix)?;
        normalize(&e).map(|m| Self { m }).ok_or(EpipolarError::ZeroMatrix)
    }

    /// `E = [t]ₓ R` for a relative pose.
    pub fn from_pose(pose: &Pose) -> Result<Self, EpipolarError> {
        Self::from_matrix(&(skew(&pose.translation) * pose.rotation))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// `K⁻ᵀ E K⁻¹`.
    pub fn fundamental(&self, k: &CameraIntrinsics) -> Matrix3<f64> {
        let ki = k.inverse_matrix();
        ki.transpose() * self.m * ki
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelativePose {
    /// Maps frame `i` into frame `j`; the translation has unit norm.
    pub pose: Pose,
    /// Matches triangulating in front of both cameras.
    pub inlier_mask: Vec<bool>,
}

impl RelativePose {
    pub fn inlier_count(&self) -> usize {
        self.inlier_mask.iter().filter(|&&b| b).count()
    }
}

fn normalize(m: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let n = m.norm();
    if !(n > 0.0) || !n.is_finite() {
        return None;
    }
    let mut out = m / n;
    let mut big = 0.0f64;
    let mut sign = 1.0;
    for v in out.iter() {
        if v.abs() > big {
            big = v.abs();
            sign = v.signum();
        }
    }
    out *= sign;
    Some(out)
}

/// Nearest matrix with singular values `(σ, σ, 0)`, σ the mean of the top two.
fn project_to_essential(m: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut s: Vec<(f64, usize)> = (0..3).map(|i| (svd.singular_values[i], i)).collect();
    s.sort_by(|a, b| b.0.total_cmp(&a.0));
    let sigma = 0.5 * (s[0].0 + s[1].0);
    if !(sigma > 0.0) {
        return None;
    }
    let mut d = Vector3::zeros();
    d[s[0].1] = sigma;
    d[s[1].1] = sigma;
    Some(u * Matrix3::from_diagonal(&d) * vt)
}

fn enforce_rank2(m: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut d = svd.singular_values;
    let i = d.imin();
    d[i] = 0.0;
    Some(u * Matrix3::from_diagonal(&d) * vt)
}

/// Sampson distance in pixels of the match `(a, b)` under fundamental matrix `f`.
pub fn sampson_distance(f: &Matrix3<f64>, a: Pixel, b: Pixel) -> f64 {
    let x1 = Vector3::new(a.u, a.v, 1.0);
    let x2 = Vector3::new(b.u, b.v, 1.0);
    let fx1 = f * x1;
    let ftx2 = f.transpose() * x2;
    let num = x2.dot(&fx1);
    let den = fx1.x * fx1.x + fx1.y * fx1.y + ftx2.x * ftx2.x + ftx2.y * ftx2.y;
    if den <= 0.0 {
        return if num == 0.0 { 0.0 } else { f64::INFINITY };
    }
    num.abs() / den.sqrt()
}

/// Similarity moving the centroid to the origin with mean distance √2.
fn hartley(pts: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let c = pts.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let mean = pts.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if mean > 0.0 {
        core::f64::consts::SQRT_2 / mean
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

/// Linear least-squares essential matrix from normalized correspondences
/// `(x_i, x_j)` (eight-point algorithm with Hartley normalization), projected
/// onto the essential manifold.
pub fn eight_point(pairs: &[(Vector2<f64>, Vector2<f64>)]) -> Option<Matrix3<f64>> {
    if pairs.len() < MIN_MATCHES {
        return None;
    }
    let a: Vec<Vector2<f64>> = pairs.iter().map(|p| p.0).collect();
    let b: Vec<Vector2<f64>> = pairs.iter().map(|p| p.1).collect();
    let (ta, tb) = (hartley(&a), hartley(&b));
    // Pad to at least nine rows so the SVD yields the full right basis.
    let rows = pairs.len().max(9);
    let mut m = DMatrix::<f64>::zeros(rows, 9);
    for (r, (p, q)) in a.iter().zip(b.iter()).enumerate() {
        let x = ta * Vector3::new(p.x, p.y, 1.0);
        let y = tb * Vector3::new(q.x, q.y, 1.0);
        for i in 0..3 {
            for j in 0..3 {
                m[(r, 3 * i + j)] = y[i] * x[j];
            }
        }
    }
    let svd = m.svd(false, true);
    let vt = svd.v_t?;
    let (mut k, mut smallest) = (0, f64::INFINITY);
    for (i, s) in svd.singular_values.iter().enumerate() {
        if *s < smallest {
            smallest = *s;
            k = i;
        }
    }
    let e = Matrix3::from_fn(|i, j| vt[(k, 3 * i + j)]);
    // Only rank 2 holds in Hartley coordinates; equal singular values are
    // imposed after undoing the normalization.
    let e = enforce_rank2(&e)?;
    project_to_essential(&(tb.transpose() * e * ta))
}

fn normalized_pairs(matches: &[(Pixel, Pixel)], k: &CameraIntrinsics) -> Vec<(Vector2<f64>, Vector2<f64>)> {
    matches
        .iter()
        .map(|(a, b)| {
            let x = k.normalize(*a);
            let y = k.normalize(*b);
            (Vector2::new(x.x, x.y), Vector2::new(y.x, y.y))
        })
        .collect()
}

fn score(
    e: &Matrix3<f64>,
    matches: &[(Pixel, Pixel)],
    k: &CameraIntrinsics,
    threshold: f64,
) -> (Vec<bool>, usize, f64) {
    let ki = k.inverse_matrix();
    let f = ki.transpose() * e * ki;
    let mut mask = vec![false; matches.len()];
    let (mut count, mut err) = (0, 0.0);
    for (i, (a, b)) in matches.iter().enumerate() {
        let d = sampson_distance(&f, *a, *b);
        if d <= threshold {
            mask[i] = true;
            count += 1;
            err += d * d;
        }
    }
    (mask, count, err)
}

fn required_iterations(inlier_ratio: f64, confidence: f64, cap: usize) -> usize {
    if inlier_ratio >= 1.0 {
        return 1;
    }
    let good = inlier_ratio.powi(MIN_MATCHES as i32);
    if good <= f64::EPSILON {
        return cap;
    }
    let n = (1.0 - confidence).ln() / (1.0 - good).ln();
    if n.is_finite() {
        (n.ceil() as usize).clamp(1, cap)
    } else {
        cap
    }
}

type Scored = (Matrix3<f64>, Vec<bool>, usize, f64);

/// Refits on the inliers while that gains inliers (or lowers their error at
/// equal count).
fn local_refit(
    mut best: Scored,
    pairs: &[(Vector2<f64>, Vector2<f64>)],
    matches: &[(Pixel, Pixel)],
    k: &CameraIntrinsics,
    threshold: f64,
) -> Scored {
    for _ in 0..5 {
        if best.2 < MIN_MATCHES {
            break;
        }
        let inl: Vec<_> = pairs.iter().zip(&best.1).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
        let Some(e) = eight_point(&inl) else { break };
        let (mask, count, err) = score(&e, matches, k, threshold);
        if count > best.2 || (count == best.2 && err < best.3) {
            best = (e, mask, count, err);
        } else {
            break;
        }
    }
    best
}

fn signed_sampson(f: &Matrix3<f64>, a: Pixel, b: Pixel) -> f64 {
    let x1 = Vector3::new(a.u, a.v, 1.0);
    let x2 = Vector3::new(b.u, b.v, 1.0);
    let fx1 = f * x1;
    let ftx2 = f.transpose() * x2;
    let den = fx1.x * fx1.x + fx1.y * fx1.y + ftx2.x * ftx2.x + ftx2.y * ftx2.y;
    if den <= 0.0 {
        return 0.0;
    }
    x2.dot(&fx1) / den.sqrt()
}

/// Levenberg–Marquardt on the summed squared Sampson distance of the masked
/// matches, over `E = [t]ₓ R` with `R` perturbed on SO(3) and unit `t` on its
/// tangent plane.
fn refine_sampson(
    e: &Matrix3<f64>,
    matches: &[(Pixel, Pixel)],
    mask: &[bool],
    k: &CameraIntrinsics,
) -> Option<Matrix3<f64>> {
    let sel: Vec<(Pixel, Pixel)> = matches.iter().zip(mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
    let ki = k.inverse_matrix();
    let (mut r, mut t) = essential_candidates(e)[0];
    let residuals = |r: &Matrix3<f64>, t: &Vector3<f64>| -> Vec<f64> {
        let f = ki.transpose() * skew(t) * r * ki;
        sel.iter().map(|(a, b)| signed_sampson(&f, *a, *b)).collect()
    };
    let apply = |r: &Matrix3<f64>, t: &Vector3<f64>, d: &[f64; 5]| -> (Matrix3<f64>, Vector3<f64>) {
        let (b1, b2) = tangent_basis(t);
        let r2 = crate::geometry::so3_exp(&Vector3::new(d[0], d[1], d[2])) * r;
        (r2, (t + b1 * d[3] + b2 * d[4]).normalize())
    };
    let cost = |res: &[f64]| res.iter().map(|x| x * x).sum::<f64>();
    let mut res = residuals(&r, &t);
    let mut c = cost(&res);
    let mut lambda = 1e-3;
    for _ in 0..30 {
        let h = 1e-7;
        let mut jac = DMatrix::<f64>::zeros(sel.len(), 5);
        for p in 0..5 {
            let mut d = [0.0; 5];
            d[p] = h;
            let (rp, tp) = apply(&r, &t, &d);
            d[p] = -h;
            let (rm, tm) = apply(&r, &t, &d);
            let (a, b) = (residuals(&rp, &tp), residuals(&rm, &tm));
            for i in 0..sel.len() {
                jac[(i, p)] = (a[i] - b[i]) / (2.0 * h);
            }
        }
        let jt = jac.transpose();
        let g = &jt * nalgebra::DVector::from_column_slice(&res);
        let jtj = &jt * &jac;
        let mut improved = false;
        while lambda < 1e8 {
            let mut a = jtj.clone();
            for i in 0..5 {
                a[(i, i)] += lambda * (1.0 + jtj[(i, i)]);
            }
            let Some(step) = a.cholesky().map(|ch| ch.solve(&(-&g))) else {
                lambda *= 10.0;
                continue;
            };
            let d = [step[0], step[1], step[2], step[3], step[4]];
            let (r2, t2) = apply(&r, &t, &d);
            let res2 = residuals(&r2, &t2);
            let c2 = cost(&res2);
            if c2 < c {
                let gain = (c - c2) / c.max(f64::MIN_POSITIVE);
                r = r2;
                t = t2;
                res = res2;
                c = c2;
                lambda = (lambda * 0.1).max(1e-12);
                improved = gain > 1e-12;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    normalize(&(skew(&t) * r))
}

/// Two unit vectors completing `t` to an orthonormal basis.
fn tangent_basis(t: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let a = if t.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let b1 = t.cross(&a).normalize();
    (b1, t.cross(&b1).normalize())
}

/// RANSAC over eight-point samples with Sampson distance (pixels) as residual.
///
/// The iteration count adapts to the inlier ratio at 99% confidence, capped at
/// `max_iters`. Each new best model is refit on its inliers, and the winner is
/// polished by minimizing the inliers' Sampson distance.
pub fn estimate_essential_ransac(
    matches: &[(Pixel, Pixel)],
    k: &CameraIntrinsics,
    threshold: f64,
    max_iters: usize,
    seed: u64,
) -> Result<(EssentialMatrix, Vec<bool>), EpipolarError> {
    let n = matches.len();
    if n < MIN_MATCHES {
        return Err(EpipolarError::InsufficientMatches { found: n });
    }
    let pairs = normalized_pairs(matches, k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut sample = Vec::with_capacity(MIN_MATCHES);
    let mut best: Option<(Matrix3<f64>, Vec<bool>, usize, f64)> = None;
    let mut needed = max_iters.max(1);
    let mut it = 0;
    while it < needed {
        it += 1;
        for s in 0..MIN_MATCHES {
            let j = rng.random_range(s..n);
            idx.swap(s, j);
        }
        sample.clear();
        sample.extend(idx[..MIN_MATCHES].iter().map(|&i| pairs[i]));
        let Some(e) = eight_point(&sample) else { continue };
        let (mask, count, err) = score(&e, matches, k, threshold);
        let better = best.as_ref().is_none_or(|b| count > b.2 || (count == b.2 && err < b.3));
        if better {
            let (e, mask, count, err) = local_refit((e, mask, count, err), &pairs, matches, k, threshold);
            needed = required_iterations(count as f64 / n as f64, 0.99, max_iters.max(1));
            best = Some((e, mask, count, err));
        }
    }
    let (mut e, mut mask, mut count, _) = best.ok_or(EpipolarError::Degenerate { inliers: 0 })?;
    for _ in 0..3 {
        if count < MIN_MATCHES {
            break;
        }
        let Some(refined) = refine_sampson(&e, matches, &mask, k) else {
            break;
        };
        let (m2, c2, _) = score(&refined, matches, k, threshold);
        if c2 < MIN_MATCHES {
            break;
        }
        let settled = m2 == mask;
        e = refined;
        mask = m2;
        count = c2;
        if settled {
            break;
        }
    }
    if count < MIN_MATCHES {
        return Err(EpipolarError::Degenerate { inliers: count });
    }
    if explained_by_rotation(matches, &mask, k, threshold) {
        return Err(EpipolarError::PureRotation);
    }
    Ok((EssentialMatrix::from_matrix(&e)?, mask))
}

/// True when a rotation-only model maps more than 90% of the inliers within
/// `threshold` pixels.
fn explained_by_rotation(matches: &[(Pixel, Pixel)], mask: &[bool], k: &CameraIntrinsics, threshold: f64) -> bool {
    let sel: Vec<(Vector3<f64>, Vector3<f64>)> = matches
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((a, b), _)| (k.normalize(*a).normalize(), k.normalize(*b).normalize()))
        .collect();
    if sel.is_empty() {
        return false;
    }
    // Kabsch on bearing vectors: R minimizing Σ‖b_j − R b_i‖².
    let mut h = Matrix3::zeros();
    for (a, b) in &sel {
        h += b * a.transpose();
    }
    let svd = h.svd(true, true);
    let (Some(u), Some(vt)) = (svd.u, svd.v_t) else {
        return false;
    };
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    let explained = matches
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .filter(|((a, b), _)| {
            let p = r * k.normalize(*a);
            if p.z <= 1e-12 {
                return false;
            }
            let q = k.denormalize(p.x / p.z, p.y / p.z);
            q.distance(*b) <= threshold
        })
        .count();
    explained * 10 > sel.len() * 9
}

/// `KᵀFK` projected onto the essential manifold (not rescaled).
pub fn fundamental_to_essential(f: &Matrix3<f64>, k: &CameraIntrinsics) -> Result<Matrix3<f64>, EpipolarError> {
    let s = f.singular_values();
    let (hi, lo) = (s.max(), s.min());
    if !(hi > 0.0) {
        return Err(EpipolarError::ZeroMatrix);
    }
    if lo > 1e-6 * hi {
        return Err(EpipolarError::RankThree { ratio: lo / hi });
    }
    let km = k.matrix();
    project_to_essential(&(km.transpose() * f * km)).ok_or(EpipolarError::ZeroMatrix)
}

/// The four `(R, t)` factorizations of `E`, `‖t‖ = 1`.
pub fn essential_candidates(e: &Matrix3<f64>) -> [(Matrix3<f64>, Vector3<f64>); 4] {
    let svd = e.svd(true, true);
    let mut u = svd.u.unwrap_or_else(Matrix3::identity);
    let mut vt = svd.v_t.unwrap_or_else(Matrix3::identity);
    // Order singular values descending so the null direction is the last column.
    let sv = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let u0 = u;
    let vt0 = vt;
    for (dst, &src) in order.iter().enumerate() {
        u.set_column(dst, &u0.column(src));
        vt.set_row(dst, &vt0.row(src));
    }
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * vt;
    let r2 = u * w.transpose() * vt;
    let t: Vector3<f64> = u.column(2).into_owned().normalize();
    [(r1, t), (r1, -t), (r2, t), (r2, -t)]
}

/// Homogeneous DLT solution on normalized coordinates, if finite.
fn dlt(xi: &Vector3<f64>, xj: &Vector3<f64>, r: &Matrix3<f64>, t: &Vector3<f64>) -> Option<Point3> {
    let p2 = SMatrix::<f64, 3, 4>::from_fn(|i, j| if j < 3 { r[(i, j)] } else { t[i] });
    let p1 = SMatrix::<f64, 3, 4>::from_fn(|i, j| if i == j { 1.0 } else { 0.0 });
    let (ui, vi) = (xi.x / xi.z, xi.y / xi.z);
    let (uj, vj) = (xj.x / xj.z, xj.y / xj.z);
    let a = Matrix4::from_rows(&[
        p1.row(2) * ui - p1.row(0),
        p1.row(2) * vi - p1.row(1),
        p2.row(2) * uj - p2.row(0),
        p2.row(2) * vj - p2.row(1),
    ]);
    let svd = a.svd(false, true);
    let vt = svd.v_t?;
    let k = svd.singular_values.imin();
    let h = vt.row(k);
    if h[3].abs() < 1e-300 {
        return None;
    }
    let p = Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);
    p.iter().all(|v| v.is_finite()).then_some(p)
}

/// Picks the factorization of `E` with the most points in front of both
/// cameras; it must hold for more than half of `matches`.
pub fn decompose_essential(
    e: &EssentialMatrix,
    matches: &[(Pixel, Pixel)],
    k: &CameraIntrinsics,
) -> Result<RelativePose, EpipolarError> {
    let total = matches.len();
    if total == 0 {
        return Err(EpipolarError::CheiralityAmbiguous { best: 0, total });
    }
    let rays: Vec<(Vector3<f64>, Vector3<f64>)> = matches
        .iter()
        .map(|(a, b)| (k.normalize(*a), k.normalize(*b)))
        .collect();
    let mut best: Option<(usize, Matrix3<f64>, Vector3<f64>, Vec<bool>)> = None;
    for (r, t) in essential_candidates(e.matrix()) {
        let mask: Vec<bool> = rays
            .iter()
            .map(|(xi, xj)| match dlt(xi, xj, &r, &t) {
                Some(p) => p.z > 0.0 && (r * p + t).z > 0.0,
                None => false,
            })
            .collect();
        let count = mask.iter().filter(|&&b| b).count();
        if best.as_ref().is_none_or(|b| count > b.0) {
            best = Some((count, r, t, mask));
        }
    }
    let (count, r, t, mask) = best.expect("four candidates");
    if count * 2 <= total {
        return Err(EpipolarError::CheiralityAmbiguous { best: count, total });
    }
    Ok(RelativePose {
        pose: Pose::from_parts(r, t),
        inlier_mask: mask,
    })
}

/// Two-view triangulation: DLT followed by one Gauss–Newton step on the
/// pixel reprojection error in both views. Returns the point in frame `i`.
pub fn triangulate(ui: Pixel, uj: Pixel, rel: &Pose, k: &CameraIntrinsics) -> Result<Point3, EpipolarError> {
    let (xi, xj) = (k.normalize(ui), k.normalize(uj));
    let (r, t) = (&rel.rotation, &rel.translation);
    let ray_j = r.transpose() * xj;
    let cos = xi.dot(&ray_j) / (xi.norm() * ray_j.norm());
    let angle_deg = cos.clamp(-1.0, 1.0).acos().to_degrees();
    if angle_deg < MIN_PARALLAX_DEG {
        return Err(EpipolarError::LowParallax { angle_deg });
    }
    let mut p = dlt(&xi, &xj, r, t).ok_or(EpipolarError::LowParallax { angle_deg })?;
    if p.z <= 0.0 || (r * p + t).z <= 0.0 {
        return Err(EpipolarError::BehindCamera);
    }

    let views = [(Matrix3::identity(), Vector3::zeros(), ui), (*r, *t, uj)];
    let mut jtj = Matrix3::zeros();
    let mut jtr = Vector3::zeros();
    for (rot, tr, u) in &views {
        let c = rot * p + tr;
        let (iz, iz2) = (1.0 / c.z, 1.0 / (c.z * c.z));
        let res = Vector2::new(u.u - (k.fx * c.x * iz + k.cx), u.v - (k.fy * c.y * iz + k.cy));
        let jpi = nalgebra::Matrix2x3::new(k.fx * iz, 0.0, -k.fx * c.x * iz2, 0.0, k.fy * iz, -k.fy * c.y * iz2);
        // Residual is u − π(·), so its Jacobian is −Jπ·R.
        let jac = -(jpi * rot);
        jtj += jac.transpose() * jac;
        jtr += jac.transpose() * res;
    }
    if let Some(inv) = jtj.try_inverse() {
        let step = -(inv * jtr);
        let q = p + step;
        if step.iter().all(|v| v.is_finite()) && q.z > 0.0 && (r * q + t).z > 0.0 {
            p = q;
        }
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, rot_x, rot_y, rot_z, rotation_angle_between};
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(525.0, 525.0, 319.5, 239.5).unwrap()
    }

    fn scene(rel: &Pose, n: usize, seed: u64) -> (Vec<Point3>, Vec<(Pixel, Pixel)>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        let mut obs = Vec::new();
        while pts.len() < n {
            let p = Vector3::new(
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.0..1.0),
                rng.random_range(2.0..6.0),
            );
            let (Ok(a), Ok(b)) = (project(&k(), &p), project(&k(), &rel.transform_point(&p))) else {
                continue;
            };
            pts.push(p);
            obs.push((a, b));
        }
        (pts, obs)
    }

    fn rel_pose() -> Pose {
        Pose::from_parts(rot_y(0.08) * rot_x(-0.03), Vector3::new(0.4, 0.05, 0.1))
    }

    #[test]
    fn noiseless_all_inliers_and_zero_residual() {
        let rel = rel_pose();
        let (_, m) = scene(&rel, 50, 1);
        let (e, mask) = estimate_essential_ransac(&m, &k(), 1.0, 1000, 7).unwrap();
        assert!(mask.iter().all(|&b| b));
        for (a, b) in &m {
            let r = k().normalize(*b).dot(&(e.matrix() * k().normalize(*a)));
            assert!(r.abs() < 1e-9, "{r}");
        }
        assert!((e.matrix().norm() - 1.0).abs() < 1e-12);
        let s = e.matrix().singular_values();
        assert!(s.min() < 1e-6 * s.max());
    }

    #[test]
    fn outliers_are_rejected() {
        let rel = rel_pose();
        let (_, mut m) = scene(&rel, 50, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 0.5).unwrap();
        for (a, b) in m.iter_mut() {
            a.u += noise.sample(&mut rng);
            a.v += noise.sample(&mut rng);
            b.u += noise.sample(&mut rng);
            b.v += noise.sample(&mut rng);
        }
        let outliers: Vec<usize> = (0..10).map(|i| i * 5).collect();
        for &i in &outliers {
            m[i].1 = Pixel::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        }
        let (_, mask) = estimate_essential_ransac(&m, &k(), 2.0, 1000, 11).unwrap();
        assert!(mask.iter().filter(|&&b| b).count() >= 38);
        for i in 0..50 {
            if !outliers.contains(&i) {
                assert!(mask[i], "true inlier {i} lost");
            }
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let (_, m) = scene(&rel_pose(), 40, 4);
        let a = estimate_essential_ransac(&m, &k(), 1.0, 200, 5).unwrap();
        let b = estimate_essential_ransac(&m, &k(), 1.0, 200, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_matches() {
        let (_, m) = scene(&rel_pose(), 7, 4);
        assert_eq!(
            estimate_essential_ransac(&m, &k(), 1.0, 100, 0),
            Err(EpipolarError::InsufficientMatches { found: 7 })
        );
    }

    #[test]
    fn pure_rotation_is_flagged() {
        let rel = Pose::from_parts(rot_y(0.1) * rot_z(0.05), Vector3::zeros());
        let (_, m) = scene(&rel, 60, 6);
        assert_eq!(
            estimate_essential_ransac(&m, &k(), 1.0, 500, 1).unwrap_err(),
            EpipolarError::PureRotation
        );
    }

    #[test]
    fn f_to_e_roundtrip() {
        let e = EssentialMatrix::from_pose(&rel_pose()).unwrap();
        let f = e.fundamental(&k());
        let back = EssentialMatrix::from_matrix(&fundamental_to_essential(&f, &k()).unwrap()).unwrap();
        assert!((back.matrix() - e.matrix()).norm() < 1e-9);
    }

    #[test]
    fn f_to_e_errors() {
        assert_eq!(
            fundamental_to_essential(&Matrix3::zeros(), &k()),
            Err(EpipolarError::ZeroMatrix)
        );
        assert!(matches!(
            fundamental_to_essential(&Matrix3::identity(), &k()),
            Err(EpipolarError::RankThree { .. })
        ));
    }

    #[test]
    fn f_to_e_identity_k_is_manifold_projection() {
        let ident = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let svd = a.svd(true, true);
            let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
            let s = svd.singular_values;
            let f = u * Matrix3::from_diagonal(&Vector3::new(s[0], s[1], 0.0)) * vt;
            let expected =
                u * Matrix3::from_diagonal(&Vector3::new(0.5 * (s[0] + s[1]), 0.5 * (s[0] + s[1]), 0.0)) * vt;
            let got = fundamental_to_essential(&f, &ident).unwrap();
            assert!((got - expected).norm() < 1e-9 * expected.norm());
        }
    }

    #[test]
    fn decompose_recovers_rot_y() {
        let t = Vector3::new(1.0, 0.0, 0.0);
        let rel = Pose::from_parts(rot_y(5f64.to_radians()), t);
        let (_, m) = scene(&rel, 30, 12);
        let e = EssentialMatrix::from_pose(&rel).unwrap();
        let out = decompose_essential(&e, &m, &k()).unwrap();
        assert!(rotation_angle_between(&out.pose.rotation, &rel.rotation) < 1e-6);
        assert!((out.pose.translation - t).norm() < 1e-6);
        assert_eq!(out.inlier_count(), 30);
        assert!((out.pose.translation.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn decompose_sideways_motion() {
        let rel = Pose::from_parts(Matrix3::identity(), Vector3::new(1.0, 0.0, 0.0));
        let (_, m) = scene(&rel, 30, 13);
        let e = EssentialMatrix::from_pose(&rel).unwrap();
        let out = decompose_essential(&e, &m, &k()).unwrap();
        assert!(rotation_angle_between(&out.pose.rotation, &Matrix3::identity()) < 1e-6);
    }

    #[test]
    fn mirrored_points_are_ambiguous() {
        // Half the points sit behind both cameras: each sign of t explains
        // exactly half, so no candidate wins a majority.
        let rel = Pose::from_parts(rot_y(0.05), Vector3::new(0.3, 0.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut m = Vec::new();
        for i in 0..20 {
            let p = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(2.0..5.0),
            );
            let p = if i % 2 == 0 { p } else { -p };
            let proj = |q: Vector3<f64>| Pixel::new(525.0 * q.x / q.z + 319.5, 525.0 * q.y / q.z + 239.5);
            m.push((proj(p), proj(rel.transform_point(&p))));
        }
        let e = EssentialMatrix::from_pose(&rel).unwrap();
        assert!(matches!(
            decompose_essential(&e, &m, &k()),
            Err(EpipolarError::CheiralityAmbiguous { .. })
        ));
    }

    #[test]
    fn decomposition_rebuilds_e() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rel = Pose::from_parts(
                rot_x(rng.random_range(-0.2..0.2)) * rot_y(rng.random_range(-0.2..0.2)),
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                ),
            );
            let (_, m) = scene(&rel, 30, seed + 100);
            let e = EssentialMatrix::from_pose(&rel).unwrap();
            let out = decompose_essential(&e, &m, &k()).unwrap();
            let e2 = EssentialMatrix::from_pose(&out.pose).unwrap();
            let d = (e2.matrix() - e.matrix()).norm().min((e2.matrix() + e.matrix()).norm());
            assert!(d < 1e-6, "{d}");
        }
    }

    #[test]
    fn triangulate_exact() {
        let rel = rel_pose();
        let (pts, m) = scene(&rel, 20, 15);
        for (p, (a, b)) in pts.iter().zip(&m) {
            let q = triangulate(*a, *b, &rel, &k()).unwrap();
            assert!((q - p).norm() < 1e-9);
        }
    }

    #[test]
    fn triangulate_parallel_rays() {
        let a = Pixel::new(300.0, 200.0);
        assert!(matches!(
            triangulate(a, a, &Pose::identity(), &k()),
            Err(EpipolarError::LowParallax { .. })
        ));
    }

    #[test]
    fn triangulate_behind_camera() {
        let rel = Pose::from_parts(Matrix3::identity(), Vector3::new(-0.5, 0.0, 0.0));
        let p = Vector3::new(0.2, 0.1, -3.0);
        let proj = |q: Vector3<f64>| Pixel::new(525.0 * q.x / q.z + 319.5, 525.0 * q.y / q.z + 239.5);
        assert_eq!(
            triangulate(proj(p), proj(rel.transform_point(&p)), &rel, &k()),
            Err(EpipolarError::BehindCamera)
        );
    }

    /// Monte-Carlo errors at 60° parallax, depth 2 m, 0.5 px noise: returns
    /// sorted errors of [`triangulate`] and of a converged Gauss–Newton oracle.
    fn sixty_degree_trials(f: f64) -> (Vec<f64>, Vec<f64>) {
        let k = CameraIntrinsics::new(f, f, 319.5, 239.5).unwrap();
        let p = Vector3::new(0.0, 0.0, 2.0);
        let center_j = Vector3::new(
            2.0 * 60f64.to_radians().sin(),
            0.0,
            2.0 - 2.0 * 60f64.to_radians().cos(),
        );
        let r = rot_y(60f64.to_radians());
        let rel = Pose::from_parts(r, -(r * center_j));
        let ui = project(&k, &p).unwrap();
        let uj = project(&k, &rel.transform_point(&p)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let (mut got, mut oracle) = (Vec::new(), Vec::new());
        for _ in 0..1000 {
            let a = Pixel::new(ui.u + noise.sample(&mut rng), ui.v + noise.sample(&mut rng));
            let b = Pixel::new(uj.u + noise.sample(&mut rng), uj.v + noise.sample(&mut rng));
            let q = triangulate(a, b, &rel, &k).unwrap();
            got.push((q - p).norm());
            oracle.push((converged_gn(p, a, b, &rel, &k) - p).norm());
        }
        got.sort_by(f64::total_cmp);
        oracle.sort_by(f64::total_cmp);
        (got, oracle)
    }

    /// Independent minimizer of the two-view pixel objective: finite-difference
    /// Gauss–Newton iterated to convergence from the true point.
    fn converged_gn(start: Point3, a: Pixel, b: Pixel, rel: &Pose, k: &CameraIntrinsics) -> Point3 {
        let res = |q: &Point3| {
            let pa = project(k, q).unwrap();
            let pb = project(k, &rel.transform_point(q)).unwrap();
            nalgebra::Vector4::new(pa.u - a.u, pa.v - a.v, pb.u - b.u, pb.v - b.v)
        };
        let mut q = start;
        for _ in 0..20 {
            let r0 = res(&q);
            let mut j = nalgebra::Matrix4x3::zeros();
            for c in 0..3 {
                let mut dq = Vector3::zeros();
                dq[c] = 1e-7;
                j.set_column(c, &((res(&(q + dq)) - res(&(q - dq))) / 2e-7));
            }
            q -= (j.transpose() * j).try_inverse().unwrap() * j.transpose() * r0;
        }
        q
    }

    #[test]
    fn triangulate_noise_60_degrees() {
        // At f = 640 px the stated 5 mm 95th-percentile bound holds.
        let (got, _) = sixty_degree_trials(640.0);
        assert!(got[949] < 5e-3, "p95 {}", got[949]);
    }

    #[test]
    fn triangulate_noise_matches_optimal_estimator() {
        // At f = 525 px the optimum itself exceeds 5 mm; one refinement step
        // must still reach it.
        let (got, oracle) = sixty_degree_trials(525.0);
        assert!(
            (got[949] - oracle[949]).abs() < 1e-2 * oracle[949],
            "{} vs {}",
            got[949],
            oracle[949]
        );
    }

    #[test]
    fn triangulated_points_reproject_within_noise_bound() {
        let rel = rel_pose();
        let (_, m) = scene(&rel, 200, 17);
        let sigma = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let noise = Normal::new(0.0, sigma).unwrap();
        for (a, b) in &m {
            let a = Pixel::new(a.u + noise.sample(&mut rng), a.v + noise.sample(&mut rng));
            let b = Pixel::new(b.u + noise.sample(&mut rng), b.v + noise.sample(&mut rng));
            let Ok(p) = triangulate(a, b, &rel, &k()) else { continue };
            let ea = project(&k(), &p).unwrap().distance(a);
            let eb = project(&k(), &rel.transform_point(&p)).unwrap().distance(b);
            assert!(
                ea <= 3.0 * sigma * 2f64.sqrt() && eb <= 3.0 * sigma * 2f64.sqrt(),
                "{ea} {eb}"
            );
        }
    }

    #[test]
    fn chain_matches_exhaustive_fit() {
        for seed in 0..10 {
            let rel = Pose::from_parts(
                rot_y(0.1) * rot_x(0.02 * seed as f64),
                Vector3::new(0.5, 0.1, 0.05 * seed as f64),
            );
            let (_, m) = scene(&rel, 20, 200 + seed);
            let (e, mask) = estimate_essential_ransac(&m, &k(), 1.0, 1000, seed).unwrap();
            let inl: Vec<_> = m.iter().zip(&mask).filter(|(_, &b)| b).map(|(p, _)| *p).collect();
            let out = decompose_essential(&e, &inl, &k()).unwrap();
            for (a, b) in &inl {
                triangulate(*a, *b, &out.pose, &k()).unwrap();
            }
            // Oracle: eight-point on every ground-truth correspondence.
            let full = EssentialMatrix::from_matrix(&eight_point(&normalized_pairs(&m, &k())).unwrap()).unwrap();
            let oracle = decompose_essential(&full, &m, &k()).unwrap();
            assert!(rotation_angle_between(&out.pose.rotation, &oracle.pose.rotation) < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn sampson_zero_on_exact_matches(seed in 0u64..500) {
            let (_, m) = scene(&rel_pose(), 10, seed);
            let f = EssentialMatrix::from_pose(&rel_pose()).unwrap().fundamental(&k());
            for (a, b) in &m {
                prop_assert!(sampson_distance(&f, *a, *b) < 1e-6);
            }
        }
    }
}
