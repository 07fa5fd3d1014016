//! Flat `key = value` run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use edgeslam_core::ba::{Gauge, LmConfig};
use edgeslam_core::ekf::{Gates, NoiseModel};
use edgeslam_core::features::{CannyConfig, LShapeConfig, OrbConfig};
use edgeslam_core::losses::LossWeights;
use edgeslam_core::CameraIntrinsics;
use nalgebra::{Matrix3, Matrix6};
use serde::Deserialize;

use crate::error::{resolve, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sequential,
    Pipelined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightsMode {
    Fixed,
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub dataset: PathBuf,
    pub output: PathBuf,
    pub fx: Option<f64>,
    pub fy: Option<f64>,
    pub cx: Option<f64>,
    pub cy: Option<f64>,
    pub depth_scale_factor: f64,
    pub max_dt: f64,
    pub max_frames: usize,
    pub mode: Mode,
    pub queue_capacity: usize,

    pub max_keypoints: usize,
    pub fast_threshold: u8,
    pub orb_levels: usize,
    pub orb_scale: f64,
    pub match_max_distance: u32,
    pub match_ratio: f64,
    pub canny_low: f32,
    pub canny_high: f32,
    pub canny_sigma: f32,
    pub lshape_min_segment: usize,
    pub max_junctions: usize,

    pub ransac_threshold: f64,
    pub ransac_max_iters: usize,
    pub seed: u64,
    pub min_inliers: usize,
    pub keyframe_parallax: f64,
    pub max_keyframe_gap: usize,

    pub ekf_beta: f64,
    pub ekf_lambda: f64,
    pub api_angle_sigma: f64,
    pub vo_position_sigma: f64,
    pub vo_angle_sigma: f64,
    pub gate_angle: f64,
    pub gate_position: f64,

    pub api_velocity_noise: f64,
    pub api_angle_noise: f64,
    pub api_velocity_bias: f64,
    pub battery_decay: f64,
    pub api_seed: u64,

    pub window: usize,
    pub anchor_cap: usize,
    pub weights_mode: WeightsMode,
    pub lambda_reproj: f64,
    pub lambda_cycle: f64,
    pub lambda_shape: f64,
    pub lambda_theta: f64,
    pub lambda_col: f64,
    pub huber: f64,
    pub lm_mu_init: f64,
    pub lm_max_iters: usize,
    pub lm_rel_tol: f64,
    pub lm_abs_tol: f64,

    pub align: bool,
}

impl Default for Config {
    fn default() -> Self {
        let lm = LmConfig::default();
        Self {
            dataset: PathBuf::new(),
            output: PathBuf::from("out"),
            fx: None,
            fy: None,
            cx: None,
            cy: None,
            depth_scale_factor: edgeslam_core::depth::TUM_DEPTH_SCALE,
            max_dt: edgeslam_core::eval::DEFAULT_MAX_DT,
            max_frames: 0,
            mode: Mode::Sequential,
            queue_capacity: 4,
            max_keypoints: 1000,
            fast_threshold: 20,
            orb_levels: 1,
            orb_scale: 1.2,
            match_max_distance: 64,
            match_ratio: 0.8,
            canny_low: 50.0,
            canny_high: 150.0,
            canny_sigma: 1.4,
            lshape_min_segment: 6,
            max_junctions: 16,
            ransac_threshold: 1.0,
            ransac_max_iters: 1000,
            seed: 42,
            min_inliers: 30,
            keyframe_parallax: 12.0,
            max_keyframe_gap: 15,
            ekf_beta: 1e-4,
            ekf_lambda: 0.1,
            api_angle_sigma: 0.02,
            vo_position_sigma: 0.05,
            vo_angle_sigma: 0.02,
            gate_angle: 0.5,
            gate_position: 1.0,
            api_velocity_noise: 0.01,
            api_angle_noise: 0.005,
            api_velocity_bias: 0.01,
            battery_decay: 0.002,
            api_seed: 7,
            window: edgeslam_core::ba::DEFAULT_WINDOW,
            anchor_cap: 500,
            weights_mode: WeightsMode::Fixed,
            lambda_reproj: 1.0,
            lambda_cycle: 1.0,
            lambda_shape: 1.0,
            lambda_theta: 1.0,
            lambda_col: 1.0,
            huber: edgeslam_core::losses::HUBER_DELTA,
            lm_mu_init: lm.mu_init,
            lm_max_iters: 10,
            lm_rel_tol: 1e-6,
            lm_abs_tol: lm.abs_tol,
            align: false,
        }
    }
}

fn check(ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg.to_string()))
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads, resolves paths against the file's directory, and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut c = Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        c.dataset = resolve(base, &c.dataset);
        c.output = resolve(base, &c.output);
        c.validate()?;
        Ok(c)
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        let (Some(fx), Some(fy), Some(cx), Some(cy)) = (self.fx, self.fy, self.cx, self.cy) else {
            return Err(Error::Config(
                "intrinsics missing: fx, fy, cx and cy are required".into(),
            ));
        };
        CameraIntrinsics::new(fx, fy, cx, cy).map_err(|e| Error::Config(format!("intrinsics: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        check(!self.dataset.as_os_str().is_empty(), "dataset path is required")?;
        check(
            self.dataset.is_dir(),
            &format!("dataset directory {} does not exist", self.dataset.display()),
        )?;
        self.intrinsics()?;
        check(self.depth_scale_factor > 0.0, "depth_scale_factor must be positive")?;
        check(self.max_dt > 0.0, "max_dt must be positive")?;
        check(self.queue_capacity >= 1, "queue_capacity must be at least 1")?;
        check(self.max_keypoints >= 8, "max_keypoints must be at least 8")?;
        check((1..=4).contains(&self.orb_levels), "orb_levels must be 1 to 4")?;
        check(self.orb_scale > 1.0, "orb_scale must exceed 1")?;
        check(
            self.match_ratio > 0.0 && self.match_ratio <= 1.0,
            "match_ratio must be in (0, 1]",
        )?;
        check(
            self.canny_low > 0.0 && self.canny_low < self.canny_high && self.canny_sigma > 0.0,
            "canny thresholds need 0 < low < high and sigma > 0",
        )?;
        check(self.lshape_min_segment >= 3, "lshape_min_segment must be at least 3")?;
        check(
            self.ransac_threshold > 0.0 && self.ransac_max_iters > 0,
            "ransac threshold and iterations must be positive",
        )?;
        check(self.min_inliers >= 8, "min_inliers must be at least 8")?;
        check(self.keyframe_parallax >= 0.0, "keyframe_parallax must be non-negative")?;
        check(self.max_keyframe_gap >= 1, "max_keyframe_gap must be at least 1")?;
        check(
            self.ekf_beta >= 0.0 && self.ekf_lambda >= 0.0,
            "ekf_beta and ekf_lambda must be non-negative",
        )?;
        check(
            self.api_angle_sigma > 0.0 && self.vo_position_sigma > 0.0 && self.vo_angle_sigma > 0.0,
            "measurement sigmas must be positive",
        )?;
        check(
            self.gate_angle > 0.0 && self.gate_position > 0.0,
            "gates must be positive",
        )?;
        check(
            self.api_velocity_noise >= 0.0 && self.api_angle_noise >= 0.0 && self.battery_decay >= 0.0,
            "API noise and battery decay must be non-negative",
        )?;
        check(self.api_velocity_bias.is_finite(), "api_velocity_bias must be finite")?;
        check(self.window >= 2, "window must be at least 2")?;
        check(self.huber >= 0.0, "huber must be non-negative (0 disables it)")?;
        self.weights()
            .validate()
            .map_err(|e| Error::Config(format!("loss weights: {e}")))?;
        self.lm()
            .validate()
            .map_err(|e| Error::Config(format!("solver: {e}")))?;
        Ok(())
    }

    pub fn orb(&self) -> OrbConfig {
        OrbConfig {
            fast_threshold: self.fast_threshold,
            levels: self.orb_levels,
            scale_factor: self.orb_scale,
            grid: (8, 6),
            ..OrbConfig::default()
        }
    }

    pub fn canny(&self) -> CannyConfig {
        CannyConfig {
            sigma: self.canny_sigma,
            low: self.canny_low,
            high: self.canny_high,
        }
    }

    pub fn lshape(&self) -> LShapeConfig {
        LShapeConfig {
            seed: self.seed,
            max_junctions: self.max_junctions,
            ..LShapeConfig::default()
        }
    }

    pub fn noise(&self) -> NoiseModel {
        let mut r_vo = Matrix6::zeros();
        for i in 0..3 {
            r_vo[(i, i)] = self.vo_position_sigma.powi(2);
            r_vo[(i + 3, i + 3)] = self.vo_angle_sigma.powi(2);
        }
        NoiseModel {
            beta: self.ekf_beta,
            lambda: self.ekf_lambda,
            r_api: Matrix3::identity() * self.api_angle_sigma.powi(2),
            r_vo,
        }
    }

    pub fn gates(&self) -> Gates {
        Gates {
            angle: self.gate_angle,
            position: self.gate_position,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_reproj: self.lambda_reproj,
            lambda_cycle: self.lambda_cycle,
            lambda_shape: self.lambda_shape,
            lambda_theta: self.lambda_theta,
            lambda_col: self.lambda_col,
        }
    }

    pub fn lm(&self) -> LmConfig {
        LmConfig {
            mu_init: self.lm_mu_init,
            max_iters: self.lm_max_iters,
            rel_tol: self.lm_rel_tol,
            abs_tol: self.lm_abs_tol,
            gauge: Gauge::FixFirstPose,
            ..LmConfig::default()
        }
    }
}

/// A complete configuration file listing every key with its default.
pub fn template(dataset: &str, k: &CameraIntrinsics, output: &str) -> String {
    let d = Config::default();
    let mode = |m: Mode| match m {
        Mode::Sequential => "sequential",
        Mode::Pipelined => "pipelined",
    };
    format!(
        r#"# edgeslam run configuration. Relative paths are resolved against this file.

# Dataset directory in TUM RGB-D layout: rgb.txt, optional depth.txt,
# groundtruth.txt and api.csv.
dataset = "{dataset}"
output = "{output}"

# Pinhole intrinsics in pixels (required).
fx = {fx:?}
fy = {fy:?}
cx = {cx:?}
cy = {cy:?}

# Raw depth units per meter.
depth_scale_factor = {dsf:?}
# Timestamp association tolerance in seconds.
max_dt = {max_dt:?}
# 0 processes every frame.
max_frames = {max_frames}
# "sequential" or "pipelined" (four stages on bounded queues).
mode = "{mode}"
queue_capacity = {queue_capacity}

# Frontend.
max_keypoints = {max_keypoints}
fast_threshold = {fast_threshold}
orb_levels = {orb_levels}
orb_scale = {orb_scale:?}
match_max_distance = {match_max_distance}
match_ratio = {match_ratio:?}
canny_low = {canny_low:?}
canny_high = {canny_high:?}
canny_sigma = {canny_sigma:?}
lshape_min_segment = {lshape_min_segment}
max_junctions = {max_junctions}

# Relative pose and keyframes. RANSAC threshold is a Sampson distance in
# pixels; keyframe_parallax is the median inlier displacement in pixels.
ransac_threshold = {ransac_threshold:?}
ransac_max_iters = {ransac_max_iters}
seed = {seed}
min_inliers = {min_inliers}
keyframe_parallax = {keyframe_parallax:?}
# Frames without an accepted visual update before tracking restarts.
max_keyframe_gap = {max_keyframe_gap}

# Filter: Q = beta (1 - battery + lambda tau) I; measurement sigmas in
# radians and meters; innovation gates.
ekf_beta = {ekf_beta:?}
ekf_lambda = {ekf_lambda:?}
api_angle_sigma = {api_angle_sigma:?}
vo_position_sigma = {vo_position_sigma:?}
vo_angle_sigma = {vo_angle_sigma:?}
gate_angle = {gate_angle:?}
gate_position = {gate_position:?}

# Velocity/attitude stream synthesized from ground truth when api.csv is
# absent: white noise (m/s, rad), a lateral velocity bias (m/s) that grows
# as the battery drains, and the battery drain per second.
api_velocity_noise = {api_velocity_noise:?}
api_angle_noise = {api_angle_noise:?}
api_velocity_bias = {api_velocity_bias:?}
battery_decay = {battery_decay:?}
api_seed = {api_seed}

# Sliding-window optimization.
window = {window}
anchor_cap = {anchor_cap}
# "fixed" or "adaptive" (inverse robust variance per loss term).
weights_mode = "fixed"
lambda_reproj = {lambda_reproj:?}
lambda_cycle = {lambda_cycle:?}
lambda_shape = {lambda_shape:?}
lambda_theta = {lambda_theta:?}
lambda_col = {lambda_col:?}
# Huber threshold in pixels; 0 disables it.
huber = {huber:?}
lm_mu_init = {lm_mu_init:?}
lm_max_iters = {lm_max_iters}
lm_rel_tol = {lm_rel_tol:?}
lm_abs_tol = {lm_abs_tol:?}

# Rigidly align the estimate to ground truth before computing metrics.
align = {align}
"#,
        fx = k.fx,
        fy = k.fy,
        cx = k.cx,
        cy = k.cy,
        dsf = d.depth_scale_factor,
        max_dt = d.max_dt,
        max_frames = d.max_frames,
        mode = mode(d.mode),
        queue_capacity = d.queue_capacity,
        max_keypoints = d.max_keypoints,
        fast_threshold = d.fast_threshold,
        orb_levels = d.orb_levels,
        orb_scale = d.orb_scale,
        match_max_distance = d.match_max_distance,
        match_ratio = d.match_ratio,
        canny_low = d.canny_low,
        canny_high = d.canny_high,
        canny_sigma = d.canny_sigma,
        lshape_min_segment = d.lshape_min_segment,
        max_junctions = d.max_junctions,
        ransac_threshold = d.ransac_threshold,
        ransac_max_iters = d.ransac_max_iters,
        seed = d.seed,
        min_inliers = d.min_inliers,
        keyframe_parallax = d.keyframe_parallax,
        max_keyframe_gap = d.max_keyframe_gap,
        ekf_beta = d.ekf_beta,
        ekf_lambda = d.ekf_lambda,
        api_angle_sigma = d.api_angle_sigma,
        vo_position_sigma = d.vo_position_sigma,
        vo_angle_sigma = d.vo_angle_sigma,
        gate_angle = d.gate_angle,
        gate_position = d.gate_position,
        api_velocity_noise = d.api_velocity_noise,
        api_angle_noise = d.api_angle_noise,
        api_velocity_bias = d.api_velocity_bias,
        battery_decay = d.battery_decay,
        api_seed = d.api_seed,
        window = d.window,
        anchor_cap = d.anchor_cap,
        lambda_reproj = d.lambda_reproj,
        lambda_cycle = d.lambda_cycle,
        lambda_shape = d.lambda_shape,
        lambda_theta = d.lambda_theta,
        lambda_col = d.lambda_col,
        huber = d.huber,
        lm_mu_init = d.lm_mu_init,
        lm_max_iters = d.lm_max_iters,
        lm_rel_tol = d.lm_rel_tol,
        lm_abs_tol = d.lm_abs_tol,
        align = d.align,
    )
}
