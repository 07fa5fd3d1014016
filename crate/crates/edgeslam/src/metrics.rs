//! Trajectory metrics report written as `metrics.json`.

use edgeslam_core::eval::{alignment, ape, associate, ate_all, AteReport, Summary, Trajectory};
use edgeslam_core::Pose;
use serde::Serialize;

use crate::error::{Error, Result};

/// Reference ATE magnitudes (meters) reported alongside every evaluation for
/// comparison; they are not pass/fail targets.
pub const REFERENCE_ATE: ReferenceAte = ReferenceAte {
    rmse: 0.046,
    mean: 0.040,
    std: 0.011,
    binding: false,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReferenceAte {
    pub rmse: f64,
    pub mean: f64,
    pub std: f64,
    pub binding: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stats {
    pub rmse: f64,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl From<Summary> for Stats {
    fn from(s: Summary) -> Self {
        Stats {
            rmse: s.rmse,
            mean: s.mean,
            std: s.std,
            min: s.min,
            max: s.max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AteModes {
    pub translation_only: f64,
    pub identity_subtracted: f64,
    pub as_written: f64,
}

impl From<AteReport> for AteModes {
    fn from(r: AteReport) -> Self {
        AteModes {
            translation_only: r.translation_only,
            identity_subtracted: r.identity_subtracted,
            as_written: r.as_written,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub estimated_poses: usize,
    pub ground_truth_poses: usize,
    pub pairs: usize,
    pub max_dt: f64,
    /// Whether the estimate was rigidly aligned to ground truth first.
    pub aligned: bool,
    pub ape_rmse: f64,
    pub ape_mean: f64,
    pub ape_std: f64,
    pub ape: Stats,
    /// The default ATE is the translation-only mode.
    pub ate_rmse: f64,
    pub ate: AteModes,
    pub reference_ate: ReferenceAte,
}

fn trajectory(name: &str, samples: &[(f64, Pose)]) -> Result<Trajectory> {
    Trajectory::new(samples.to_vec()).map_err(|e| Error::Dataset(format!("{name} trajectory: {e}")))
}

pub fn evaluate(est: &[(f64, Pose)], gt: &[(f64, Pose)], max_dt: f64, align: bool) -> Result<Metrics> {
    let e = trajectory("estimated", est)?;
    let g = trajectory("ground truth", gt)?;
    let eval_err = |e: edgeslam_core::eval::EvalError| Error::Dataset(format!("evaluation: {e}"));
    let pairs = associate(&e, &g, max_dt).map_err(eval_err)?;
    let e = if align {
        e.transformed(&alignment(&e, &g, &pairs).map_err(eval_err)?)
    } else {
        e
    };
    let a = ape(&e, &g, &pairs).map_err(eval_err)?;
    let ate = ate_all(&e, &g, &pairs).map_err(eval_err)?;
    Ok(Metrics {
        estimated_poses: est.len(),
        ground_truth_poses: gt.len(),
        pairs: pairs.len(),
        max_dt,
        aligned: align,
        ape_rmse: a.summary.rmse,
        ape_mean: a.summary.mean,
        ape_std: a.summary.std,
        ape: a.summary.into(),
        ate_rmse: ate.translation_only,
        ate: ate.into(),
        reference_ate: REFERENCE_ATE,
    })
}

impl Metrics {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }
}
