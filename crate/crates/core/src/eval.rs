//! Trajectory accuracy: timestamp association, absolute pose error and
//! absolute trajectory error.
//!
//! Poses in a [`Trajectory`] map camera to world, as in TUM ground truth.

use alloc::vec::Vec;

use nalgebra::{Matrix3, Matrix4, Vector3};
#[allow(unused_imports)]
use num_traits::Float;

use crate::geometry::{Point3, Pose};

/// TUM association tolerance in seconds.
pub const DEFAULT_MAX_DT: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("trajectory needs at least 2 samples, got {0}")]
    TooShort(usize),
    #[error("timestamps must increase strictly (sample {0})")]
    NotIncreasing(usize),
    #[error("no timestamps overlap within the tolerance")]
    NoOverlap,
    #[error("no pose pairs to evaluate")]
    EmptyPairs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    samples: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn new(samples: Vec<(f64, Pose)>) -> Result<Self, EvalError> {
        if samples.len() < 2 {
            return Err(EvalError::TooShort(samples.len()));
        }
        if let Some(i) = samples.windows(2).position(|w| !(w[1].0 > w[0].0)) {
            return Err(EvalError::NotIncreasing(i + 1));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[(f64, Pose)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Applies `g` on the world side of every pose.
    pub fn transformed(&self, g: &Pose) -> Self {
        Self {
            samples: self.samples.iter().map(|(t, p)| (*t, g.compose(p))).collect(),
        }
    }
}

/// Greedy nearest-timestamp matching: candidate pairs within `max_dt` are
/// taken in order of increasing `|Δt|`, each sample used at most once.
/// Returned pairs are `(est index, gt index)` sorted by estimate index.
pub fn associate(est: &Trajectory, gt: &Trajectory, max_dt: f64) -> Result<Vec<(usize, usize)>, EvalError> {
    let a: Vec<f64> = est.samples().iter().map(|s| s.0).collect();
    let b: Vec<f64> = gt.samples().iter().map(|s| s.0).collect();
    let pairs = associate_timestamps(&a, &b, max_dt);
    if pairs.is_empty() {
        return Err(EvalError::NoOverlap);
    }
    Ok(pairs)
}

/// The matching behind [`associate`] on bare timestamps; `b` must be sorted
/// ascending.
pub fn associate_timestamps(a: &[f64], b: &[f64], max_dt: f64) -> Vec<(usize, usize)> {
    let mut cands = Vec::new();
    for (i, &ta) in a.iter().enumerate() {
        let lo = b.partition_point(|&t| t < ta - max_dt);
        for (j, &tb) in b.iter().enumerate().skip(lo) {
            if tb > ta + max_dt {
                break;
            }
            cands.push(((ta - tb).abs(), i, j));
        }
    }
    cands.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_a = alloc::vec![false; a.len()];
    let mut used_b = alloc::vec![false; b.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in cands {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub rmse: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let rmse = (values.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        Some(Self {
            rmse,
            mean,
            std,
            min: values.iter().cloned().fold(f64::INFINITY, f64::min),
            max: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApeResult {
    pub errors: Vec<f64>,
    pub summary: Summary,
}

/// Per-pair translation distance `‖t_est − t_gt‖`.
pub fn ape(est: &Trajectory, gt: &Trajectory, pairs: &[(usize, usize)]) -> Result<ApeResult, EvalError> {
    let errors: Vec<f64> = pairs
        .iter()
        .map(|&(i, j)| (est.samples[i].1.translation - gt.samples[j].1.translation).norm())
        .collect();
    let summary = Summary::of(&errors).ok_or(EvalError::EmptyPairs)?;
    Ok(ApeResult { errors, summary })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AteMode {
    /// `sqrt(mean ‖T_gt⁻¹ T_est‖_F²)`, which is 2 for identical trajectories.
    AsWritten,
    /// `sqrt(mean ‖T_gt⁻¹ T_est − I‖_F²)`.
    IdentitySubtracted,
    /// RMS of the translation of `T_gt⁻¹ T_est`.
    TranslationOnly,
}

pub fn ate_rms(est: &Trajectory, gt: &Trajectory, pairs: &[(usize, usize)], mode: AteMode) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyPairs);
    }
    let mut acc = 0.0;
    for &(i, j) in pairs {
        let rel = gt.samples[j].1.inverse().compose(&est.samples[i].1);
        acc += match mode {
            AteMode::AsWritten => rel.to_matrix().norm_squared(),
            AteMode::IdentitySubtracted => (rel.to_matrix() - Matrix4::identity()).norm_squared(),
            AteMode::TranslationOnly => rel.translation.norm_squared(),
        };
    }
    Ok((acc / pairs.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AteReport {
    pub as_written: f64,
    pub identity_subtracted: f64,
    pub translation_only: f64,
}

pub fn ate_all(est: &Trajectory, gt: &Trajectory, pairs: &[(usize, usize)]) -> Result<AteReport, EvalError> {
    Ok(AteReport {
        as_written: ate_rms(est, gt, pairs, AteMode::AsWritten)?,
        identity_subtracted: ate_rms(est, gt, pairs, AteMode::IdentitySubtracted)?,
        translation_only: ate_rms(est, gt, pairs, AteMode::TranslationOnly)?,
    })
}

fn umeyama(a: &[Point3], b: &[Point3], with_scale: bool) -> (f64, Matrix3<f64>, Vector3<f64>) {
    let n = a.len() as f64;
    let ma = a.iter().fold(Vector3::zeros(), |s, p| s + p) / n;
    let mb = b.iter().fold(Vector3::zeros(), |s, p| s + p) / n;
    let mut cov = Matrix3::zeros();
    let mut var_a = 0.0;
    for (pa, pb) in a.iter().zip(b) {
        cov += (pb - mb) * (pa - ma).transpose();
        var_a += (pa - ma).norm_squared();
    }
    cov /= n;
    var_a /= n;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    let s = if with_scale && var_a > 0.0 {
        svd.singular_values.component_mul(&d.diagonal()).sum() / var_a
    } else {
        1.0
    };
    (s, r, mb - r * ma * s)
}

/// Similarity `(s, R, t)` minimizing `Σ‖s R a + t − b‖²`.
pub fn align_similarity(a: &[Point3], b: &[Point3]) -> (f64, Matrix3<f64>, Vector3<f64>) {
    umeyama(a, b, true)
}

/// Rigid transform minimizing `Σ‖g(a) − b‖²`.
pub fn align_rigid(a: &[Point3], b: &[Point3]) -> Pose {
    let (_, r, t) = umeyama(a, b, false);
    Pose::from_parts(r, t)
}

/// Rigid transform that best maps the paired estimate positions onto the
/// ground truth.
pub fn alignment(est: &Trajectory, gt: &Trajectory, pairs: &[(usize, usize)]) -> Result<Pose, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyPairs);
    }
    let a: Vec<Point3> = pairs.iter().map(|&(i, _)| est.samples[i].1.translation).collect();
    let b: Vec<Point3> = pairs.iter().map(|&(_, j)| gt.samples[j].1.translation).collect();
    Ok(align_rigid(&a, &b))
}
