//! The four-stage pipeline: frontend, fusion, anchoring and windowed
//! optimization, run either in one thread or as threads joined by bounded
//! queues. Both modes produce identical artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use edgeslam_core::ba::{adaptive_weights, build_problem, lm_solve, TargetShares, Track, WindowFrame};
use edgeslam_core::depth::DepthMap;
use edgeslam_core::ekf::{ApiMeasurement, EkfState, Fusion, Outcome};
use edgeslam_core::epipolar::{decompose_essential, estimate_essential_ransac};
use edgeslam_core::features::{
    detect_edges, detect_keypoints, detect_lshape_junctions, match_descriptors, EdgeMap, Keypoint,
};
use edgeslam_core::image::GrayImage;
use edgeslam_core::losses::{EdgeAnchor, Junction3d, LossWeights};
use edgeslam_core::{CameraIntrinsics, Pixel, Point3, Pose};
use log::{info, warn};
use nalgebra::Matrix6;
use serde_json::json;

use crate::api::ApiNoise;
use crate::config::{Config, Mode, WeightsMode};
use crate::dataset::{ApiSource, Dataset};
use crate::error::{Error, Result};
use crate::imageio::{self, RgbImage};
use crate::metrics::{self, Metrics};
use crate::ply::{self, ColoredPoint};
use crate::tum;

const INITIAL_COVARIANCE: f64 = 1e-6;

fn at_frame(index: usize, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("frame {index}: {m}")),
        Error::Dataset(m) => Error::Dataset(format!("frame {index}: {m}")),
        Error::Runtime(m) => Error::Runtime(format!("frame {index}: {m}")),
    }
}

fn runtime(index: usize, e: impl std::fmt::Display) -> Error {
    Error::Runtime(format!("frame {index}: {e}"))
}

pub fn api_noise(cfg: &Config) -> ApiNoise {
    ApiNoise {
        velocity_noise: cfg.api_velocity_noise,
        angle_noise: cfg.api_angle_noise,
        velocity_bias: cfg.api_velocity_bias,
        battery_decay: cfg.battery_decay,
        seed: cfg.api_seed,
    }
}

/// Output of the frontend stage.
pub struct Frame {
    pub index: usize,
    pub timestamp: f64,
    pub rgb: Arc<RgbImage>,
    pub gray: GrayImage,
    pub depth: Option<Arc<DepthMap>>,
    pub keypoints: Vec<Keypoint>,
    pub ms: f64,
}

/// Output of the fusion stage.
pub struct Tracked {
    pub frame: Frame,
    /// Filter estimate, camera-to-world.
    pub ekf: Pose,
    pub keyframe: bool,
    /// Matched keypoint pairs (reference keyframe, this frame) that passed
    /// the epipolar and cheirality checks; empty unless this is a keyframe.
    pub links: Vec<(usize, usize)>,
    pub matches: usize,
    pub inliers: usize,
    pub ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorSample {
    pub pixel: Pixel,
    pub depth: f64,
    pub color: [u8; 3],
}

/// Output of the anchoring stage.
pub struct Anchored {
    pub tracked: Tracked,
    pub anchors: Vec<AnchorSample>,
    /// Lifted at window index 0; re-indexed when a window is built.
    pub junctions: Vec<Junction3d>,
    pub ms: f64,
}

/// Stage 1: image loading and keypoints.
pub struct Frontend {
    dataset: Dataset,
    cfg: Config,
}

impl Frontend {
    pub fn load(&self, index: usize) -> Result<Frame> {
        let start = Instant::now();
        let pair = &self.dataset.frames[index];
        let root = &self.dataset.root;
        let rgb = imageio::load_rgb(&root.join(&pair.rgb)).map_err(|e| at_frame(index, e))?;
        let depth = match &pair.depth {
            Some(p) => {
                let d =
                    imageio::load_depth(&root.join(p), self.cfg.depth_scale_factor).map_err(|e| at_frame(index, e))?;
                if (d.width(), d.height()) != (rgb.width, rgb.height) {
                    return Err(Error::Dataset(format!(
                        "frame {index}: depth is {}x{} but color is {}x{}",
                        d.width(),
                        d.height(),
                        rgb.width,
                        rgb.height
                    )));
                }
                Some(Arc::new(d))
            }
            None => None,
        };
        let gray = rgb.to_gray();
        let keypoints =
            detect_keypoints(&gray, self.cfg.max_keypoints, &self.cfg.orb()).map_err(|e| runtime(index, e))?;
        Ok(Frame {
            index,
            timestamp: pair.timestamp,
            rgb: Arc::new(rgb),
            gray,
            depth,
            keypoints,
            ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// Stage 2: relative pose against the reference keyframe, fused with the
/// measurement stream.
pub struct Tracker {
    cfg: Config,
    k: CameraIntrinsics,
    api: Vec<ApiMeasurement>,
    next_api: usize,
    fusion: Option<Fusion>,
    reference: Vec<Keypoint>,
    since_reference: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

impl Tracker {
    fn new(cfg: Config, k: CameraIntrinsics, api: Vec<ApiMeasurement>) -> Self {
        Self {
            cfg,
            k,
            api,
            next_api: 0,
            fusion: None,
            reference: Vec::new(),
            since_reference: 0,
        }
    }

    pub fn track(&mut self, frame: Frame) -> Result<Tracked> {
        let start = Instant::now();
        let index = frame.index;
        let t = frame.timestamp;
        let Some(fusion) = self.fusion.as_mut() else {
            let state = EkfState::from_pose(&Pose::identity(), Matrix6::identity() * INITIAL_COVARIANCE);
            self.fusion = Some(Fusion::new(state, t, self.cfg.noise(), self.cfg.gates()));
            self.next_api = self.api.partition_point(|m| m.timestamp <= t);
            self.reference = frame.keypoints.clone();
            return Ok(Tracked {
                frame,
                ekf: Pose::identity(),
                keyframe: true,
                links: Vec::new(),
                matches: 0,
                inliers: 0,
                ms: start.elapsed().as_secs_f64() * 1e3,
            });
        };
        while let Some(m) = self.api.get(self.next_api).filter(|m| m.timestamp <= t) {
            if m.timestamp > fusion.time() {
                fusion.api(m).map_err(|e| runtime(index, e))?;
            }
            self.next_api += 1;
        }

        let cfg = &self.cfg;
        let matches = match_descriptors(
            &self.reference,
            &frame.keypoints,
            cfg.match_max_distance,
            cfg.match_ratio,
        );
        let mut inliers = 0;
        let mut links = Vec::new();
        let mut keyframe = false;
        if matches.len() >= cfg.min_inliers {
            let pairs: Vec<(Pixel, Pixel)> = matches
                .iter()
                .map(|m| (self.reference[m.index_i].position, frame.keypoints[m.index_j].position))
                .collect();
            let seed = cfg.seed ^ index as u64;
            let solved = estimate_essential_ransac(&pairs, &self.k, cfg.ransac_threshold, cfg.ransac_max_iters, seed)
                .and_then(|(e, mask)| decompose_essential(&e, &pairs, &self.k).map(|rel| (rel, mask)));
            if let Ok((rel, mask)) = solved {
                let good: Vec<usize> = (0..pairs.len()).filter(|&i| mask[i] && rel.inlier_mask[i]).collect();
                inliers = good.len();
                let parallax = median(good.iter().map(|&i| pairs[i].0.distance(pairs[i].1)).collect());
                if inliers >= cfg.min_inliers && parallax >= cfg.keyframe_parallax {
                    let outcome = fusion.vo_relative(&rel.pose, t).map_err(|e| runtime(index, e))?;
                    if outcome.outcome == Outcome::Accepted {
                        keyframe = true;
                        links = good.iter().map(|&i| (matches[i].index_i, matches[i].index_j)).collect();
                    }
                }
            }
        }
        if !keyframe {
            self.since_reference += 1;
            if self.since_reference >= cfg.max_keyframe_gap {
                fusion.rebase();
                keyframe = true;
            }
        }
        if keyframe {
            self.since_reference = 0;
            self.reference = frame.keypoints.clone();
        }
        Ok(Tracked {
            ekf: fusion.state.pose(),
            frame,
            keyframe,
            links,
            matches: matches.len(),
            inliers,
            ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// Stage 3: edge pixels with depth and L-shape junctions on keyframes.
pub struct Anchorer {
    cfg: Config,
    k: CameraIntrinsics,
}

impl Anchorer {
    pub fn anchor(&self, tracked: Tracked) -> Result<Anchored> {
        let start = Instant::now();
        let (mut anchors, mut junctions) = (Vec::new(), Vec::new());
        if let (true, Some(depth)) = (tracked.keyframe, &tracked.frame.depth) {
            let f = &tracked.frame;
            let c = self.cfg.canny();
            let edges = detect_edges(&f.gray, c.low, c.high, c.sigma).map_err(|e| runtime(f.index, e))?;
            let valid = edges
                .pixels()
                .iter()
                .copied()
                .filter(|&(x, y)| depth.get(x as usize, y as usize).is_some());
            let with_depth = EdgeMap::from_pixels(edges.width(), edges.height(), valid);
            for (x, y) in with_depth.subsample(self.cfg.anchor_cap) {
                let d = depth.get(x as usize, y as usize).expect("filtered on valid depth");
                anchors.push(AnchorSample {
                    pixel: Pixel::new(x as f64, y as f64),
                    depth: d,
                    color: f.rgb.pixel(x as usize, y as usize),
                });
            }
            junctions = detect_lshape_junctions(&edges, self.cfg.lshape_min_segment, &self.cfg.lshape())
                .iter()
                .filter_map(|j| Junction3d::from_junction(j, 0, depth, &self.k))
                .collect();
        }
        Ok(Anchored {
            tracked,
            anchors,
            junctions,
            ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointSource {
    /// Triangulated keypoint track.
    Track(u64),
    /// Edge anchor from the keyframe with this frame index.
    Anchor(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapPoint {
    pub position: Point3,
    pub color: [u8; 3],
    pub source: PointSource,
}

/// Append-only map in the world frame of the first camera.
#[derive(Debug, Clone, Default)]
pub struct MapStore {
    pub points: Vec<MapPoint>,
}

impl MapStore {
    pub fn anchor_count(&self) -> usize {
        self.points
            .iter()
            .filter(|p| matches!(p.source, PointSource::Anchor(_)))
            .count()
    }

    pub fn to_ply(&self) -> Vec<ColoredPoint> {
        self.points
            .iter()
            .map(|p| ColoredPoint {
                position: p.position,
                color: p.color,
            })
            .collect()
    }
}

struct Keyframe {
    frame: usize,
    timestamp: f64,
    /// Refined camera-to-world pose.
    pose: Pose,
    ekf: Pose,
    depth_scale: f64,
    pixels: Vec<Pixel>,
    track_ids: Vec<Option<u64>>,
    /// Kept only while this is the newest keyframe, for track colors.
    rgb: Option<Arc<RgbImage>>,
    depth: Option<Arc<DepthMap>>,
    anchors: Vec<AnchorSample>,
    junctions: Vec<Junction3d>,
}

struct TrackState {
    /// (keyframe index, pixel), in keyframe order.
    observations: Vec<(usize, Pixel)>,
    color: [u8; 3],
    position: Option<Point3>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimes {
    pub frontend: f64,
    pub fusion: f64,
    pub anchors: f64,
    pub optimizer: f64,
}

/// Stage 4: sliding-window optimization and map bookkeeping.
pub struct Optimizer {
    cfg: Config,
    k: CameraIntrinsics,
    sparse_only: bool,
    keyframes: Vec<Keyframe>,
    /// Index of the oldest keyframe in the window.
    window_start: usize,
    tracks: BTreeMap<u64, TrackState>,
    next_track: u64,
    /// (timestamp, keyframe index, filter pose) per frame.
    frames: Vec<(f64, usize, Pose)>,
    map: MapStore,
    reports: Vec<String>,
    solves: usize,
    failures: usize,
    times: StageTimes,
}

fn pixel_color(img: &RgbImage, p: Pixel) -> [u8; 3] {
    let x = (p.u.round().max(0.0) as usize).min(img.width - 1);
    let y = (p.v.round().max(0.0) as usize).min(img.height - 1);
    img.pixel(x, y)
}

impl Optimizer {
    fn new(cfg: Config, k: CameraIntrinsics, sparse_only: bool) -> Self {
        Self {
            cfg,
            k,
            sparse_only,
            keyframes: Vec::new(),
            window_start: 0,
            tracks: BTreeMap::new(),
            next_track: 0,
            frames: Vec::new(),
            map: MapStore::default(),
            reports: Vec::new(),
            solves: 0,
            failures: 0,
            times: StageTimes::default(),
        }
    }

    fn weights(&self) -> LossWeights {
        let mut w = self.cfg.weights();
        if self.sparse_only {
            w.lambda_cycle = 0.0;
            w.lambda_shape = 0.0;
            w.lambda_theta = 0.0;
            w.lambda_col = 0.0;
        }
        w
    }

    pub fn push(&mut self, a: Anchored) -> Result<()> {
        let start = Instant::now();
        let Anchored {
            tracked,
            anchors,
            junctions,
            ms: anchor_ms,
        } = a;
        let f = tracked.frame;
        let mut losses = (f64::NAN, f64::NAN);
        if tracked.keyframe {
            let pose = match self.keyframes.last() {
                Some(prev) => prev.pose.compose(&prev.ekf.inverse()).compose(&tracked.ekf),
                None => tracked.ekf,
            };
            let kf = self.keyframes.len();
            let mut track_ids = vec![None; f.keypoints.len()];
            if let Some(prev) = self.keyframes.last_mut() {
                let prev_rgb = prev.rgb.take();
                for &(i, j) in &tracked.links {
                    let px = f.keypoints[j].position;
                    let id = match prev.track_ids[i] {
                        Some(id) => id,
                        None => {
                            let id = self.next_track;
                            self.next_track += 1;
                            let origin = prev.pixels[i];
                            let color = prev_rgb.as_ref().map_or([255; 3], |img| pixel_color(img, origin));
                            self.tracks.insert(
                                id,
                                TrackState {
                                    observations: vec![(kf - 1, origin)],
                                    color,
                                    position: None,
                                },
                            );
                            prev.track_ids[i] = Some(id);
                            id
                        }
                    };
                    self.tracks
                        .get_mut(&id)
                        .expect("live track")
                        .observations
                        .push((kf, px));
                    track_ids[j] = Some(id);
                }
            }
            self.keyframes.push(Keyframe {
                frame: f.index,
                timestamp: f.timestamp,
                pose,
                ekf: tracked.ekf,
                depth_scale: 1.0,
                pixels: f.keypoints.iter().map(|k| k.position).collect(),
                track_ids,
                rgb: Some(f.rgb.clone()),
                depth: if self.sparse_only { None } else { f.depth.clone() },
                anchors,
                junctions,
            });
            while self.keyframes.len() - self.window_start > self.cfg.window {
                self.retire(self.window_start);
                self.window_start += 1;
            }
            if self.keyframes.len() - self.window_start >= 2 {
                losses = self.optimize();
            }
        }
        let kf = self.keyframes.len() - 1;
        self.frames.push((f.timestamp, kf, tracked.ekf));
        let ms = start.elapsed().as_secs_f64() * 1e3;
        self.times.frontend += f.ms;
        self.times.fusion += tracked.ms;
        self.times.anchors += anchor_ms;
        self.times.optimizer += ms;
        info!(
            "frame={} t={:.6} kf={} matches={} inliers={} loss_before={:.6e} loss_after={:.6e} ms={:.1}",
            f.index,
            f.timestamp,
            if tracked.keyframe { 1 } else { 0 },
            tracked.matches,
            tracked.inliers,
            losses.0,
            losses.1,
            f.ms + tracked.ms + anchor_ms + ms
        );
        Ok(())
    }

    /// Solves the current window; returns (initial, final) loss, NaN when no
    /// problem could be built.
    fn optimize(&mut self) -> (f64, f64) {
        let range = self.window_start..self.keyframes.len();
        let window_ids: Vec<usize> = range.clone().map(|i| self.keyframes[i].frame).collect();
        let newest = *window_ids.last().expect("non-empty window");
        self.solves += 1;
        let frames: Vec<WindowFrame> = range
            .clone()
            .map(|i| {
                let kf = &self.keyframes[i];
                WindowFrame::new(kf.frame as u64, kf.timestamp, kf.pose.inverse(), kf.depth.clone())
            })
            .collect();
        let mut window_tracks: BTreeMap<u64, Track> = BTreeMap::new();
        for (id, t) in &self.tracks {
            let observations: Vec<(usize, Pixel)> = t
                .observations
                .iter()
                .filter(|(kf, _)| *kf >= self.window_start)
                .map(|(kf, px)| (kf - self.window_start, *px))
                .collect();
            if observations.len() >= 2 {
                window_tracks.insert(*id, Track { id: *id, observations });
            }
        }
        let tracks: Vec<Track> = window_tracks.into_values().collect();
        let mut anchors = Vec::new();
        let mut junctions = Vec::new();
        for (w, i) in range.clone().enumerate() {
            let kf = &self.keyframes[i];
            if kf.depth.is_none() {
                continue;
            }
            let t_cw = kf.pose.inverse();
            anchors.extend(
                kf.anchors
                    .iter()
                    .map(|a| EdgeAnchor::new(w, a.pixel, a.depth, &self.k, &t_cw, kf.depth_scale)),
            );
            junctions.extend(kf.junctions.iter().cloned().map(|mut j| {
                j.frame = w;
                j
            }));
        }
        let built = build_problem(self.k, frames, &tracks, anchors, junctions, self.weights()).map(|mut p| {
            for (w, i) in range.clone().enumerate() {
                p.frames[w].depth_scale = self.keyframes[i].depth_scale;
            }
            p.update_anchors();
            p.huber = Some(self.cfg.huber);
            p
        });
        let mut p = match built {
            Ok(p) => p,
            Err(e) => return self.failed(newest, &window_ids, e),
        };
        if self.cfg.weights_mode == WeightsMode::Adaptive {
            match adaptive_weights(&p, &TargetShares::default()) {
                Ok(w) => p.weights = w,
                Err(e) => warn!("keyframe {newest}: adaptive weights unavailable ({e}); keeping fixed weights"),
            }
        }
        let (solved, report) = match lm_solve(&p, &self.cfg.lm()) {
            Ok(r) => r,
            Err(e) => return self.failed(newest, &window_ids, e),
        };
        for (w, i) in range.enumerate() {
            let kf = &mut self.keyframes[i];
            kf.pose = solved.frames[w].pose.inverse();
            kf.depth_scale = solved.frames[w].depth_scale;
        }
        for (id, pt) in solved.point_ids.iter().zip(&solved.points) {
            if let Some(t) = self.tracks.get_mut(id) {
                t.position = Some(*pt);
            }
        }
        let iterations: Vec<_> = report
            .iterations
            .iter()
            .map(|r| json!({"iteration": r.iteration, "loss": r.loss, "mu": r.mu, "accepted": r.accepted}))
            .collect();
        let w = &solved.weights;
        let line = json!({
            "keyframe": newest,
            "window": window_ids,
            "points": solved.points.len(),
            "observations": solved.observations.len(),
            "anchors": solved.anchors.len(),
            "junctions": solved.junctions.len(),
            "weights": {
                "reproj": w.lambda_reproj,
                "cycle": w.lambda_cycle,
                "shape": w.lambda_shape,
                "theta": w.lambda_theta,
                "col": w.lambda_col,
            },
            "depth_scales": solved.scales(),
            "cycle_pairs": report.cycle_pairs,
            "cycle_skipped": report.cycle_skipped,
            "initial_loss": report.initial_loss,
            "final_loss": report.final_loss,
            "termination": report.termination.as_str(),
            "iterations": iterations,
        });
        self.reports.push(line.to_string());
        (report.initial_loss, report.final_loss)
    }

    fn failed(&mut self, newest: usize, window: &[usize], e: impl std::fmt::Display) -> (f64, f64) {
        self.failures += 1;
        warn!("keyframe {newest}: window not optimized: {e}");
        self.reports
            .push(json!({"keyframe": newest, "window": window, "error": e.to_string()}).to_string());
        (f64::NAN, f64::NAN)
    }

    /// Moves keyframe `i`'s anchors and the tracks that end at it into the map.
    fn retire(&mut self, i: usize) {
        let kf = &mut self.keyframes[i];
        if kf.depth.is_some() {
            for a in &kf.anchors {
                let p = kf
                    .pose
                    .transform_point(&(self.k.normalize(a.pixel) * (a.depth * kf.depth_scale)));
                self.map.points.push(MapPoint {
                    position: p,
                    color: a.color,
                    source: PointSource::Anchor(kf.frame),
                });
            }
        }
        kf.anchors = Vec::new();
        kf.junctions = Vec::new();
        kf.depth = None;
        kf.rgb = None;
        kf.pixels = Vec::new();
        kf.track_ids = Vec::new();
        let ended: Vec<u64> = self
            .tracks
            .iter()
            .filter(|(_, t)| t.observations.last().is_some_and(|o| o.0 <= i))
            .map(|(id, _)| *id)
            .collect();
        for id in ended {
            self.retire_track(id);
        }
    }

    fn retire_track(&mut self, id: u64) {
        let t = self.tracks.remove(&id).expect("live track");
        if let Some(p) = t.position {
            self.map.points.push(MapPoint {
                position: p,
                color: t.color,
                source: PointSource::Track(id),
            });
        }
    }

    fn finish(mut self) -> Outcome4 {
        for i in self.window_start..self.keyframes.len() {
            self.retire(i);
        }
        let rest: Vec<u64> = self.tracks.keys().copied().collect();
        for id in rest {
            self.retire_track(id);
        }
        let trajectory = self
            .frames
            .iter()
            .map(|(t, kf, ekf)| {
                let k = &self.keyframes[*kf];
                (*t, k.pose.compose(&k.ekf.inverse()).compose(ekf))
            })
            .collect();
        Outcome4 {
            trajectory,
            map: self.map,
            reports: self.reports,
            keyframes: self.keyframes.len(),
            solves: self.solves,
            failures: self.failures,
            times: self.times,
        }
    }
}

struct Outcome4 {
    trajectory: Vec<(f64, Pose)>,
    map: MapStore,
    reports: Vec<String>,
    keyframes: usize,
    solves: usize,
    failures: usize,
    times: StageTimes,
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub frames: usize,
    pub keyframes: usize,
    pub solves: usize,
    pub failed_solves: usize,
    pub sparse_only: bool,
    pub api_source: ApiSource,
    pub trajectory: Vec<(f64, Pose)>,
    pub map: MapStore,
    pub metrics: Option<Metrics>,
    pub times: StageTimes,
    pub output: PathBuf,
}

fn run_sequential(n: usize, fe: &Frontend, tr: &mut Tracker, an: &Anchorer, opt: &mut Optimizer) -> Result<()> {
    for i in 0..n {
        let frame = fe.load(i)?;
        let tracked = tr.track(frame)?;
        opt.push(an.anchor(tracked)?)?;
    }
    Ok(())
}

fn run_pipelined(
    n: usize,
    capacity: usize,
    fe: &Frontend,
    tr: &mut Tracker,
    an: &Anchorer,
    opt: &mut Optimizer,
) -> Result<()> {
    let (tx1, rx1) = crossbeam_channel::bounded::<Result<Frame>>(capacity);
    let (tx2, rx2) = crossbeam_channel::bounded::<Result<Tracked>>(capacity);
    let (tx3, rx3) = crossbeam_channel::bounded::<Result<Anchored>>(capacity);
    std::thread::scope(|s| {
        s.spawn(move || {
            for i in 0..n {
                let r = fe.load(i);
                let stop = r.is_err();
                if tx1.send(r).is_err() || stop {
                    break;
                }
            }
        });
        s.spawn(move || {
            for r in rx1 {
                let r = r.and_then(|f| tr.track(f));
                let stop = r.is_err();
                if tx2.send(r).is_err() || stop {
                    break;
                }
            }
        });
        s.spawn(move || {
            for r in rx2 {
                let r = r.and_then(|t| an.anchor(t));
                let stop = r.is_err();
                if tx3.send(r).is_err() || stop {
                    break;
                }
            }
        });
        for r in rx3 {
            opt.push(r?)?;
        }
        Ok(())
    })
}

fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Runs the pipeline over `cfg.dataset` and writes `trajectory.txt`,
/// `map.ply`, `solver.jsonl` and, with ground truth, `metrics.json` into
/// `cfg.output`.
pub fn run(cfg: &Config) -> Result<RunSummary> {
    cfg.validate()?;
    let k = cfg.intrinsics()?;
    let dataset = Dataset::open(&cfg.dataset, cfg.max_dt, cfg.max_frames)?;
    let sparse_only = !dataset.has_depth();
    if sparse_only {
        warn!("no depth images; running sparse-only (cycle and shape terms disabled)");
    }
    let api_source = dataset.api_source();
    match api_source {
        ApiSource::Missing => warn!("no api.csv and no ground truth; metric scale is unobservable"),
        ApiSource::Synthesized => info!("synthesizing the measurement stream from ground truth"),
        ApiSource::Recorded => {}
    }
    let api = dataset.api_stream(&api_noise(cfg));
    let n = dataset.frames.len();
    let groundtruth = dataset.groundtruth.clone();
    info!("{n} frames from {}", dataset.root.display());

    let fe = Frontend {
        dataset,
        cfg: cfg.clone(),
    };
    let mut tr = Tracker::new(cfg.clone(), k, api);
    let an = Anchorer { cfg: cfg.clone(), k };
    let mut opt = Optimizer::new(cfg.clone(), k, sparse_only);
    match cfg.mode {
        Mode::Sequential => run_sequential(n, &fe, &mut tr, &an, &mut opt)?,
        Mode::Pipelined => run_pipelined(n, cfg.queue_capacity.max(1), &fe, &mut tr, &an, &mut opt)?,
    }
    let out = opt.finish();

    fs::create_dir_all(&cfg.output).map_err(|e| Error::io(&cfg.output, e))?;
    tum::write_trajectory(&cfg.output.join("trajectory.txt"), &out.trajectory)?;
    ply::write(&cfg.output.join("map.ply"), &out.map.to_ply())?;
    let mut jsonl = String::new();
    for line in &out.reports {
        jsonl += line;
        jsonl.push('\n');
    }
    write_file(&cfg.output.join("solver.jsonl"), jsonl.as_bytes())?;
    let metrics = match &groundtruth {
        Some(gt) => {
            let m = metrics::evaluate(&out.trajectory, gt, cfg.max_dt, cfg.align)?;
            write_file(&cfg.output.join("metrics.json"), m.to_json().as_bytes())?;
            Some(m)
        }
        None => None,
    };
    let t = out.times;
    info!(
        "stage totals ms: frontend={:.0} fusion={:.0} anchors={:.0} optimizer={:.0}",
        t.frontend, t.fusion, t.anchors, t.optimizer
    );
    info!(
        "{} keyframes, {} windows solved ({} failed), {} map points ({} anchors)",
        out.keyframes,
        out.solves - out.failures,
        out.failures,
        out.map.points.len(),
        out.map.anchor_count()
    );
    Ok(RunSummary {
        frames: n,
        keyframes: out.keyframes,
        solves: out.solves,
        failed_solves: out.failures,
        sparse_only,
        api_source,
        trajectory: out.trajectory,
        map: out.map,
        metrics,
        times: out.times,
        output: cfg.output.clone(),
    })
}
