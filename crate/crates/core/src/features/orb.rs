//! FAST-9 corners ranked by Harris response, oriented by intensity centroid
//! and described with 256-bit rotated BRIEF.

use alloc::vec::Vec;
use core::cmp::Ordering;

use super::pattern::ORB_PATTERN;
use super::{Descriptor, FeatureError, Keypoint};
use crate::geometry::Pixel;
use crate::image::{FloatImage, GrayImage};
#[allow(unused_imports)]
use num_traits::Float;

/// Keypoint detector settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrbConfig {
    pub fast_threshold: u8,
    /// Pyramid levels, 1 to 4.
    pub levels: usize,
    pub scale_factor: f64,
    pub harris_k: f64,
    /// Optional bucketing grid `(cols, rows)` used to spread keypoints over the image.
    pub grid: (usize, usize),
}

impl Default for OrbConfig {
    fn default() -> Self {
        Self {
            fast_threshold: 20,
            levels: 1,
            scale_factor: 1.2,
            harris_k: 0.04,
            grid: (1, 1),
        }
    }
}

const CIRCLE: [(i32, i32); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

const ARC: usize = 9;
const HALF_PATCH: i32 = 15;
/// Keypoints closer than this to the border are discarded so that the
/// rotated sampling pattern and orientation patch stay inside the image.
pub const EDGE_BORDER: usize = 19;
const HARRIS_BLOCK: i32 = 3;

/// Detects at most `max_count` keypoints, strongest Harris response first.
pub fn detect_keypoints(
    image: &GrayImage,
    max_count: usize,
    config: &OrbConfig,
) -> Result<Vec<Keypoint>, FeatureError> {
    if image.is_empty() {
        return Err(FeatureError::EmptyImage);
    }
    if max_count == 0 {
        return Ok(Vec::new());
    }
    let levels = config.levels.clamp(1, 4);
    let mut all = Vec::new();
    let mut pyramid = Vec::new();
    for level in 0..levels {
        let scale = config.scale_factor.powi(level as i32);
        let level_image = if level > 0 {
            let w = (image.width() as f64 / scale).round() as usize;
            let h = (image.height() as f64 / scale).round() as usize;
            if w <= 2 * EDGE_BORDER || h <= 2 * EDGE_BORDER {
                break;
            }
            image.resize(w, h)
        } else {
            image.clone()
        };
        let smoothed = detect_level(&level_image, level as u8, scale, config, &mut all);
        pyramid.push((level_image, smoothed, scale));
    }

    // Orientation and descriptor only for the survivors.
    let mut selected = select(all, max_count, image.width(), image.height(), config.grid);
    for kp in selected.iter_mut() {
        let (img, smoothed, scale) = &pyramid[kp.level as usize];
        let x = (kp.position.u / scale).round() as i32;
        let y = (kp.position.v / scale).round() as i32;
        kp.angle = intensity_centroid_angle(img, x, y);
        kp.descriptor = brief(smoothed, x, y, kp.angle);
    }
    Ok(selected)
}

fn detect_level(image: &GrayImage, level: u8, scale: f64, config: &OrbConfig, out: &mut Vec<Keypoint>) -> FloatImage {
    let (w, h) = (image.width(), image.height());
    let float = image.to_float();
    let smoothed = float.gaussian_blur(2.0);
    if w <= 2 * EDGE_BORDER || h <= 2 * EDGE_BORDER {
        return smoothed;
    }
    let mut scores = alloc::vec![0u32; w * h];
    for y in EDGE_BORDER..h - EDGE_BORDER {
        for x in EDGE_BORDER..w - EDGE_BORDER {
            scores[y * w + x] = fast_score(image, x, y, config.fast_threshold);
        }
    }
    for y in EDGE_BORDER..h - EDGE_BORDER {
        for x in EDGE_BORDER..w - EDGE_BORDER {
            let s = scores[y * w + x];
            if s == 0 || !is_local_max(&scores, w, x, y) {
                continue;
            }
            out.push(Keypoint {
                position: Pixel::new(x as f64 * scale, y as f64 * scale),
                response: harris_response(&float, x as i32, y as i32, config.harris_k),
                angle: 0.0,
                level,
                descriptor: Descriptor([0; 4]),
            });
        }
    }
    smoothed
}

/// Sum of absolute differences above threshold over the circle, or 0 when
/// no 9-long contiguous arc is uniformly brighter or darker.
fn fast_score(image: &GrayImage, x: usize, y: usize, threshold: u8) -> u32 {
    let c = image.get(x, y) as i32;
    let t = threshold as i32;
    let at = |i: usize| {
        let (dx, dy) = CIRCLE[i];
        image.get((x as i32 + dx) as usize, (y as i32 + dy) as usize) as i32
    };
    // Quick rejection using the four compass points.
    let compass = [at(0), at(4), at(8), at(12)];
    let bright = compass.iter().filter(|&&p| p > c + t).count();
    let dark = compass.iter().filter(|&&p| p < c - t).count();
    if bright < 2 && dark < 2 {
        return 0;
    }
    let ring: [i32; 16] = core::array::from_fn(at);
    let is_corner = |pred: &dyn Fn(i32) -> bool| {
        let mut run = 0;
        for i in 0..16 + ARC {
            if pred(ring[i % 16]) {
                run += 1;
                if run >= ARC {
                    return true;
                }
            } else {
                run = 0;
            }
        }
        false
    };
    let brighter = is_corner(&|p| p > c + t);
    let darker = !brighter && is_corner(&|p| p < c - t);
    if !brighter && !darker {
        return 0;
    }
    ring.iter()
        .map(|&p| {
            let d = if brighter { p - c } else { c - p };
            (d - t).max(0) as u32
        })
        .sum()
}

fn is_local_max(scores: &[u32], w: usize, x: usize, y: usize) -> bool {
    let s = scores[y * w + x];
    for dy in -1i32..=1 {
        for dx in -1i32..=1 {
            if dx == 0 && dy == 0 {
                continue;
            }
            let n = scores[(y as i32 + dy) as usize * w + (x as i32 + dx) as usize];
            // Ties go to the first pixel in raster order.
            if n > s || (n == s && (dy < 0 || (dy == 0 && dx < 0))) {
                return false;
            }
        }
    }
    true
}

fn harris_response(image: &FloatImage, x: i32, y: i32, k: f64) -> f64 {
    let (mut sxx, mut syy, mut sxy) = (0.0f64, 0.0f64, 0.0f64);
    let at = |xx: i32, yy: i32| image.get(xx as usize, yy as usize) as f64;
    for dy in -HARRIS_BLOCK..=HARRIS_BLOCK {
        for dx in -HARRIS_BLOCK..=HARRIS_BLOCK {
            let (px, py) = (x + dx, y + dy);
            let gx = (at(px + 1, py - 1) + 2.0 * at(px + 1, py) + at(px + 1, py + 1))
                - (at(px - 1, py - 1) + 2.0 * at(px - 1, py) + at(px - 1, py + 1));
            let gy = (at(px - 1, py + 1) + 2.0 * at(px, py + 1) + at(px + 1, py + 1))
                - (at(px - 1, py - 1) + 2.0 * at(px, py - 1) + at(px + 1, py - 1));
            sxx += gx * gx;
            syy += gy * gy;
            sxy += gx * gy;
        }
    }
    let norm = 1.0 / (4.0 * 255.0 * (2 * HARRIS_BLOCK + 1) as f64).powi(2);
    let (sxx, syy, sxy) = (sxx * norm, syy * norm, sxy * norm);
    sxx * syy - sxy * sxy - k * (sxx + syy).powi(2)
}

fn intensity_centroid_angle(image: &GrayImage, x: i32, y: i32) -> f64 {
    let (mut m01, mut m10) = (0.0f64, 0.0f64);
    for dy in -HALF_PATCH..=HALF_PATCH {
        for dx in -HALF_PATCH..=HALF_PATCH {
            if dx * dx + dy * dy > HALF_PATCH * HALF_PATCH {
                continue;
            }
            let v = image.get((x + dx) as usize, (y + dy) as usize) as f64;
            m10 += dx as f64 * v;
            m01 += dy as f64 * v;
        }
    }
    m01.atan2(m10)
}

fn brief(smoothed: &FloatImage, x: i32, y: i32, angle: f64) -> Descriptor {
    let (s, c) = angle.sin_cos();
    let sample = |px: i8, py: i8| {
        let rx = (c * px as f64 - s * py as f64).round() as i32;
        let ry = (s * px as f64 + c * py as f64).round() as i32;
        smoothed.get((x + rx) as usize, (y + ry) as usize)
    };
    let mut words = [0u64; 4];
    for (bit, p) in ORB_PATTERN.iter().enumerate() {
        if sample(p[0], p[1]) < sample(p[2], p[3]) {
            words[bit / 64] |= 1u64 << (bit % 64);
        }
    }
    Descriptor(words)
}

fn by_response(a: &Keypoint, b: &Keypoint) -> Ordering {
    b.response
        .partial_cmp(&a.response)
        .unwrap_or(Ordering::Equal)
        .then(a.level.cmp(&b.level))
        .then(a.position.v.partial_cmp(&b.position.v).unwrap_or(Ordering::Equal))
        .then(a.position.u.partial_cmp(&b.position.u).unwrap_or(Ordering::Equal))
}

fn select(
    mut all: Vec<Keypoint>,
    max_count: usize,
    width: usize,
    height: usize,
    grid: (usize, usize),
) -> Vec<Keypoint> {
    all.sort_by(by_response);
    let (cols, rows) = (grid.0.max(1), grid.1.max(1));
    if cols * rows == 1 || all.len() <= max_count {
        all.truncate(max_count);
        return all;
    }
    let per_cell = max_count.div_ceil(cols * rows);
    let mut counts = alloc::vec![0usize; cols * rows];
    let mut taken = alloc::vec![false; all.len()];
    let mut out = Vec::with_capacity(max_count);
    for (i, kp) in all.iter().enumerate() {
        let cx = ((kp.position.u / width as f64 * cols as f64) as usize).min(cols - 1);
        let cy = ((kp.position.v / height as f64 * rows as f64) as usize).min(rows - 1);
        let cell = cy * cols + cx;
        if counts[cell] < per_cell && out.len() < max_count {
            counts[cell] += 1;
            taken[i] = true;
            out.push(kp.clone());
        }
    }
    for (i, kp) in all.iter().enumerate() {
        if out.len() >= max_count {
            break;
        }
        if !taken[i] {
            out.push(kp.clone());
        }
    }
    out.sort_by(by_response);
    out
}
