//! A TUM-layout sequence on disk: frame list, optional depth, ground truth
//! and measurement stream.

use std::path::{Path, PathBuf};

use edgeslam_core::ekf::ApiMeasurement;
use edgeslam_core::Pose;
use log::warn;

use crate::api::{self, ApiNoise};
use crate::error::{Error, Result};
use crate::tum::{self, FramePair};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApiSource {
    /// Replayed from `api.csv`.
    Recorded,
    /// Derived from ground truth.
    Synthesized,
    /// Neither file exists; translation scale is unobservable.
    Missing,
}

impl ApiSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            ApiSource::Recorded => "recorded",
            ApiSource::Synthesized => "synthesized",
            ApiSource::Missing => "missing",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub frames: Vec<FramePair>,
    pub rgb_count: usize,
    pub depth_count: usize,
    /// RGB frames dropped for lack of a depth image within `max_dt`.
    pub unpaired: usize,
    pub groundtruth: Option<Vec<(f64, Pose)>>,
    pub recorded_api: Option<Vec<ApiMeasurement>>,
}

impl Dataset {
    /// Reads the indexes and pairs RGB with depth. Without `depth.txt`, or if
    /// no pair lies within `max_dt`, every RGB frame is kept without depth.
    pub fn open(root: &Path, max_dt: f64, max_frames: usize) -> Result<Self> {
        let rgb_path = root.join("rgb.txt");
        if !rgb_path.is_file() {
            return Err(Error::Dataset(format!("{} is missing", rgb_path.display())));
        }
        let rgb = tum::read_index(&rgb_path)?;
        if rgb.is_empty() {
            return Err(Error::Dataset(format!("{} lists no images", rgb_path.display())));
        }
        let depth_path = root.join("depth.txt");
        let depth = if depth_path.is_file() {
            tum::read_index(&depth_path)?
        } else {
            Vec::new()
        };
        let (mut frames, mut unpaired) = tum::associate_rgb_depth(&rgb, &depth, max_dt);
        if frames.is_empty() {
            if !depth.is_empty() {
                warn!("no depth image within {max_dt} s of any color image; ignoring depth");
            }
            frames = rgb
                .iter()
                .map(|e| FramePair {
                    timestamp: e.timestamp,
                    rgb: e.path.clone(),
                    depth: None,
                })
                .collect();
            unpaired = 0;
        } else if unpaired > 0 {
            warn!("{unpaired} color images have no depth image within {max_dt} s and are skipped");
        }
        if max_frames > 0 {
            frames.truncate(max_frames);
        }
        let gt_path = root.join("groundtruth.txt");
        let groundtruth = if gt_path.is_file() {
            Some(tum::read_trajectory(&gt_path)?)
        } else {
            None
        };
        let api_path = root.join("api.csv");
        let recorded_api = if api_path.is_file() {
            Some(api::read_csv(&api_path)?)
        } else {
            None
        };
        Ok(Self {
            root: root.to_path_buf(),
            frames,
            rgb_count: rgb.len(),
            depth_count: depth.len(),
            unpaired,
            groundtruth,
            recorded_api,
        })
    }

    pub fn has_depth(&self) -> bool {
        self.frames.iter().any(|f| f.depth.is_some())
    }

    pub fn api_source(&self) -> ApiSource {
        match (&self.recorded_api, &self.groundtruth) {
            (Some(_), _) => ApiSource::Recorded,
            (None, Some(_)) => ApiSource::Synthesized,
            (None, None) => ApiSource::Missing,
        }
    }

    /// The measurement stream the filter consumes.
    pub fn api_stream(&self, noise: &ApiNoise) -> Vec<ApiMeasurement> {
        match (&self.recorded_api, &self.groundtruth) {
            (Some(a), _) => a.clone(),
            (None, Some(gt)) => {
                let times: Vec<f64> = self.frames.iter().map(|f| f.timestamp).collect();
                api::synthesize(gt, &times, noise)
            }
            (None, None) => Vec::new(),
        }
    }

    pub fn span(&self) -> f64 {
        match (self.frames.first(), self.frames.last()) {
            (Some(a), Some(b)) => b.timestamp - a.timestamp,
            _ => 0.0,
        }
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "dataset: {}\ncolor images: {}\ndepth images: {}\nframes: {} ({} unpaired)\nspan: {:.3} s\n",
            self.root.display(),
            self.rgb_count,
            self.depth_count,
            self.frames.len(),
            self.unpaired,
            self.span()
        );
        s += &format!("depth: {}\n", if self.has_depth() { "yes" } else { "no (sparse-only)" });
        match &self.groundtruth {
            Some(gt) => s += &format!("ground truth: {} poses\n", gt.len()),
            None => s += "ground truth: none\n",
        }
        s += &format!("measurement stream: {}\n", self.api_source().as_str());
        s
    }
}
