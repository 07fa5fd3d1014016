//! Renders a textured synthetic room as a TUM RGB-D style dataset: color
//! PNGs, 16-bit depth PNGs, index files and ground truth.

use std::fs;
use std::path::{Path, PathBuf};

use edgeslam_core::depth::TUM_DEPTH_SCALE;
use edgeslam_core::geometry::{euler_to_rotation, rot_x, rot_y};
use edgeslam_core::synthetic::{Plane, Scene};
use edgeslam_core::{CameraIntrinsics, Point3, Pose};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio::{save_depth_raw, save_rgb, RgbImage};
use crate::tum::{format_index, format_trajectory, IndexEntry};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    pub seed: u64,
    pub intrinsics: CameraIntrinsics,
    /// Depth images lag the color images by this many seconds.
    pub depth_lag: f64,
    pub start_time: f64,
    pub write_depth: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 100,
            width: 640,
            height: 480,
            fps: 30.0,
            seed: 1,
            intrinsics: CameraIntrinsics::new(525.0, 525.0, 319.5, 239.5).unwrap(),
            depth_lag: 0.004,
            start_time: 1305031102.175,
            write_depth: true,
        }
    }
}

/// Axis-aligned rectangle `[u0, u1] × [v0, v1]` in wall coordinates.
#[derive(Debug, Clone, Copy)]
struct Rect {
    u0: f64,
    u1: f64,
    v0: f64,
    v1: f64,
    color: [u8; 3],
}

/// Irregular grid of colored cells with rectangles painted on top.
#[derive(Debug, Clone)]
struct WallTexture {
    e1: Vector3<f64>,
    e2: Vector3<f64>,
    cols: Vec<f64>,
    rows: Vec<f64>,
    cells: Vec<[u8; 3]>,
    posters: Vec<Rect>,
    /// Poster indices overlapping each bucket of a coarse grid.
    buckets: Vec<Vec<usize>>,
}

const EXTENT: f64 = 6.0;
const BUCKET: f64 = 0.5;
const BUCKETS: usize = (2.0 * EXTENT / BUCKET) as usize;

fn bucket_of(x: f64) -> usize {
    (((x + EXTENT) / BUCKET).floor().max(0.0) as usize).min(BUCKETS - 1)
}

fn random_color(rng: &mut ChaCha8Rng) -> [u8; 3] {
    [
        rng.random_range(20..236),
        rng.random_range(20..236),
        rng.random_range(20..236),
    ]
}

fn boundaries(rng: &mut ChaCha8Rng, extent: f64, min: f64, max: f64) -> Vec<f64> {
    let mut b = vec![-extent];
    while *b.last().unwrap() < extent {
        let next = b.last().unwrap() + rng.random_range(min..max);
        b.push(next);
    }
    b
}

impl WallTexture {
    fn new(plane: &Plane, rng: &mut ChaCha8Rng) -> Self {
        let n = plane.normal;
        let helper = if n.y.abs() < 0.9 { Vector3::y() } else { Vector3::z() };
        let e1 = helper.cross(&n).normalize();
        let e2 = n.cross(&e1);
        let cols = boundaries(rng, EXTENT, 0.06, 0.3);
        let rows = boundaries(rng, EXTENT, 0.06, 0.3);
        let cells = (0..(cols.len() + 1) * (rows.len() + 1))
            .map(|_| random_color(rng))
            .collect();
        let posters: Vec<Rect> = (0..300)
            .map(|_| {
                let (w, h) = (rng.random_range(0.08..0.35), rng.random_range(0.08..0.35));
                let (u0, v0) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
                let dark = rng.random_bool(0.5);
                let base: u8 = if dark {
                    rng.random_range(0..40)
                } else {
                    rng.random_range(215..=255)
                };
                Rect {
                    u0,
                    u1: u0 + w,
                    v0,
                    v1: v0 + h,
                    color: [base, base, base],
                }
            })
            .collect();
        let mut buckets = vec![Vec::new(); BUCKETS * BUCKETS];
        for (i, r) in posters.iter().enumerate() {
            for bv in bucket_of(r.v0)..=bucket_of(r.v1) {
                for bu in bucket_of(r.u0)..=bucket_of(r.u1) {
                    buckets[bv * BUCKETS + bu].push(i);
                }
            }
        }
        Self {
            e1,
            e2,
            cols,
            rows,
            cells,
            posters,
            buckets,
        }
    }

    fn color(&self, p: &Point3) -> [u8; 3] {
        let (u, v) = (p.dot(&self.e1), p.dot(&self.e2));
        let bucket = &self.buckets[bucket_of(v) * BUCKETS + bucket_of(u)];
        if let Some(&i) = bucket.iter().rev().find(|&&i| {
            let r = &self.posters[i];
            u >= r.u0 && u < r.u1 && v >= r.v0 && v < r.v1
        }) {
            return self.posters[i].color;
        }
        let c = self.cols.partition_point(|&b| b <= u);
        let r = self.rows.partition_point(|&b| b <= v);
        self.cells[r * (self.cols.len() + 1) + c]
    }
}

/// Textured room plus a camera path in the room frame.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub scene: Scene,
    textures: Vec<WallTexture>,
    /// Maps the room frame into the ground-truth world frame.
    pub world_from_room: Pose,
}

impl SynthWorld {
    pub fn new(seed: u64) -> Self {
        let scene = Scene::room(2.5, 2.0, 1.2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let textures = scene.planes.iter().map(|p| WallTexture::new(p, &mut rng)).collect();
        let world_from_room = Pose::from_parts(rot_x(-1.2) * rot_y(0.4), Vector3::new(1.3, -0.6, 1.5));
        Self {
            scene,
            textures,
            world_from_room,
        }
    }

    /// Camera-to-room pose at `t` seconds: a hand-held wobble along all three
    /// axes with a few degrees of rotation.
    pub fn camera_in_room(&self, t: f64) -> Pose {
        let w = std::f64::consts::TAU / 3.3;
        let translation = Vector3::new(
            0.15 * (w * t).sin(),
            0.08 * (1.7 * w * t).sin(),
            0.1 * (0.9 * w * t + 0.5).sin() - 0.3,
        );
        let rotation = euler_to_rotation(
            0.03 * (1.3 * w * t).sin(),
            0.05 * (w * t + 1.0).sin(),
            0.02 * (0.7 * w * t).sin(),
        );
        Pose::from_parts(rotation, translation)
    }

    /// Camera-to-world ground truth at `t`.
    pub fn ground_truth(&self, t: f64) -> Pose {
        self.world_from_room.compose(&self.camera_in_room(t))
    }

    /// Nearest plane hit along the ray with camera-frame direction `(x, y, 1)`:
    /// z-depth and plane index.
    fn cast(&self, r_wc: &Matrix3<f64>, origin: &Point3, x: f64, y: f64) -> Option<(f64, usize)> {
        let dir = r_wc * Vector3::new(x, y, 1.0);
        let mut best: Option<(f64, usize)> = None;
        for (i, p) in self.scene.planes.iter().enumerate() {
            let denom = p.normal.dot(&dir);
            if denom.abs() < 1e-12 {
                continue;
            }
            let lambda = (p.offset - p.normal.dot(origin)) / denom;
            if lambda > 0.0 && best.is_none_or(|b| lambda < b.0) {
                best = Some((lambda, i));
            }
        }
        best
    }

    /// Color (2×2 supersampled) and z-depth at pixel centers.
    pub fn render(&self, k: &CameraIntrinsics, c2room: &Pose, width: usize, height: usize) -> (RgbImage, Vec<f64>) {
        let r_wc = c2room.rotation;
        let origin = c2room.translation;
        let mut data = Vec::with_capacity(width * height * 3);
        const OFFSETS: [(f64, f64); 4] = [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)];
        for y in 0..height {
            for x in 0..width {
                let mut acc = [0u32; 3];
                for (dx, dy) in OFFSETS {
                    let (rx, ry) = ray(k, x as f64 + dx, y as f64 + dy);
                    let c = self.cast(&r_wc, &origin, rx, ry).map_or([0; 3], |(d, i)| {
                        let p = origin + r_wc * Vector3::new(rx, ry, 1.0) * d;
                        self.textures[i].color(&p)
                    });
                    for (a, v) in acc.iter_mut().zip(c) {
                        *a += v as u32;
                    }
                }
                data.extend(acc.map(|a| ((a + 2) / 4) as u8));
            }
        }
        (RgbImage { width, height, data }, self.depth(k, c2room, width, height))
    }

    /// Z-depth at pixel centers, 0 where no surface is hit.
    pub fn depth(&self, k: &CameraIntrinsics, c2room: &Pose, width: usize, height: usize) -> Vec<f64> {
        let mut depth = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let (rx, ry) = ray(k, x as f64, y as f64);
                depth.push(
                    self.cast(&c2room.rotation, &c2room.translation, rx, ry)
                        .map_or(0.0, |h| h.0),
                );
            }
        }
        depth
    }
}

fn ray(k: &CameraIntrinsics, u: f64, v: f64) -> (f64, f64) {
    ((u - k.cx) / k.fx, (v - k.cy) / k.fy)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Ground truth sampling rate in Hz.
const GT_RATE: f64 = 100.0;

/// Writes a dataset into `root`: `rgb/`, `depth/`, `rgb.txt`, `depth.txt`,
/// `groundtruth.txt` and an `edgeslam.toml` pointing at it.
pub fn write_dataset(root: &Path, cfg: &SynthConfig) -> Result<()> {
    if cfg.frames < 2 || cfg.width < 64 || cfg.height < 64 || !(cfg.fps > 0.0) {
        return Err(Error::Config(
            "synthetic dataset needs ≥2 frames, ≥64×64 pixels and fps > 0".into(),
        ));
    }
    let world = SynthWorld::new(cfg.seed);
    let k = &cfg.intrinsics;
    for sub in ["rgb", "depth"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut rgb_index = Vec::new();
    let mut depth_index = Vec::new();
    for i in 0..cfg.frames {
        let t = i as f64 / cfg.fps;
        let stamp = cfg.start_time + t;
        let (img, _) = world.render(k, &world.camera_in_room(t), cfg.width, cfg.height);
        let name = PathBuf::from(format!("rgb/{stamp:.6}.png"));
        save_rgb(&root.join(&name), &img)?;
        rgb_index.push(IndexEntry {
            timestamp: stamp,
            path: name,
        });
        if cfg.write_depth {
            let td = t + cfg.depth_lag;
            let stamp = cfg.start_time + td;
            let depth = world.depth(k, &world.camera_in_room(td), cfg.width, cfg.height);
            let raw: Vec<u16> = depth
                .iter()
                .map(|d| (d * TUM_DEPTH_SCALE).round().clamp(0.0, u16::MAX as f64) as u16)
                .collect();
            let name = PathBuf::from(format!("depth/{stamp:.6}.png"));
            save_depth_raw(&root.join(&name), cfg.width, cfg.height, &raw)?;
            depth_index.push(IndexEntry {
                timestamp: stamp,
                path: name,
            });
        }
    }
    write_text(&root.join("rgb.txt"), &format_index("color images", &rgb_index))?;
    if cfg.write_depth {
        write_text(&root.join("depth.txt"), &format_index("depth images", &depth_index))?;
    }
    let span = (cfg.frames - 1) as f64 / cfg.fps + 0.1;
    let gt: Vec<(f64, Pose)> = (0..=(span * GT_RATE).ceil() as usize)
        .map(|i| {
            let t = i as f64 / GT_RATE - 0.05;
            (cfg.start_time + t, world.ground_truth(t))
        })
        .collect();
    write_text(&root.join("groundtruth.txt"), &format_trajectory(&gt))?;
    let config = crate::config::template(".", k, "out");
    write_text(&root.join("edgeslam.toml"), &config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use edgeslam_core::{project, Pixel};

    #[test]
    fn depth_matches_scene_geometry() {
        let world = SynthWorld::new(3);
        let k = CameraIntrinsics::new(100.0, 100.0, 31.5, 23.5).unwrap();
        let pose = world.camera_in_room(0.7);
        let (img, depth) = world.render(&k, &pose, 64, 48);
        assert_eq!(img.data.len(), 64 * 48 * 3);
        let t_cw = pose.inverse();
        for (i, &d) in depth.iter().enumerate() {
            let px = Pixel::new((i % 64) as f64, (i / 64) as f64);
            let p = world.scene.point_at(&k, &t_cw, px).unwrap();
            let c = t_cw.transform_point(&p);
            assert!((c.z - d).abs() < 1e-9);
            assert!(project(&k, &c).unwrap().distance(px) < 1e-6);
        }
    }

    #[test]
    fn rendering_is_deterministic_and_textured() {
        let k = CameraIntrinsics::new(100.0, 100.0, 31.5, 23.5).unwrap();
        let a = SynthWorld::new(5);
        let b = SynthWorld::new(5);
        let pose = a.camera_in_room(0.0);
        let (ia, _) = a.render(&k, &pose, 64, 48);
        assert_eq!(ia, b.render(&k, &pose, 64, 48).0);
        let distinct: std::collections::BTreeSet<[u8; 3]> = ia.data.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        assert!(distinct.len() > 10);
    }

    #[test]
    fn ground_truth_is_room_path_in_world_frame() {
        let world = SynthWorld::new(1);
        let t = 1.1;
        let rel = world.world_from_room.inverse().compose(&world.ground_truth(t));
        let c = world.camera_in_room(t);
        assert!((rel.rotation - c.rotation).norm() < 1e-12);
        assert!((rel.translation - c.translation).norm() < 1e-12);
    }
}
