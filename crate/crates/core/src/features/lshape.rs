//! L-shaped junctions on an edge map: edge pixels where two locally straight
//! edge segments meet at a corner.

use alloc::vec::Vec;
use core::cmp::Ordering;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::EdgeMap;
use crate::geometry::Pixel;
#[allow(unused_imports)]
use num_traits::Float;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LShapeConfig {
    /// Half size of the square search window (7 gives a 15-px window).
    pub window_radius: i64,
    pub min_angle: f64,
    pub max_angle: f64,
    pub inlier_tolerance: f64,
    pub ransac_iterations: usize,
    pub seed: u64,
    /// Maximum number of junctions returned, strongest first.
    pub max_junctions: usize,
}

impl Default for LShapeConfig {
    fn default() -> Self {
        Self {
            window_radius: 7,
            min_angle: 30f64.to_radians(),
            max_angle: 150f64.to_radians(),
            inlier_tolerance: 1.0,
            ransac_iterations: 48,
            seed: 0x15_4a9e,
            max_junctions: usize::MAX,
        }
    }
}

/// Two edge segments meeting at a corner.
#[derive(Debug, Clone, PartialEq)]
pub struct LShapeJunction {
    pub corner: Pixel,
    /// Unit direction from the corner along the first segment.
    pub dir1: Vector2<f64>,
    pub dir2: Vector2<f64>,
    /// Edge pixels of each segment ordered by distance from the corner.
    pub pts1: Vec<Pixel>,
    pub pts2: Vec<Pixel>,
    /// Image-plane angle between the two segments, radians in (0, π).
    pub expected_angle: f64,
}

/// Maximum distance of a segment pixel from its fitted line through the corner.
pub const SEGMENT_TOLERANCE: f64 = 1.5;

struct Candidate {
    junction: LShapeJunction,
    offset: f64,
    support: usize,
}

pub fn detect_lshape_junctions(edges: &EdgeMap, min_segment_len: usize, config: &LShapeConfig) -> Vec<LShapeJunction> {
    let min_len = min_segment_len.max(3);
    let r = config.window_radius.max(2);
    let mut candidates = Vec::new();
    let mut window: Vec<Vector2<f64>> = Vec::new();
    for &(px, py) in edges.pixels() {
        let (x, y) = (px as i64, py as i64);
        window.clear();
        for dy in -r..=r {
            for dx in -r..=r {
                if edges.contains(x + dx, y + dy) {
                    window.push(Vector2::new((x + dx) as f64, (y + dy) as f64));
                }
            }
        }
        if window.len() < 2 * min_len || !spread_in_two_directions(&window) {
            continue;
        }
        let seed = config.seed ^ ((y as u64) << 32 | x as u64);
        if let Some(c) = fit_junction(edges, &window, Vector2::new(x as f64, y as f64), min_len, config, seed) {
            candidates.push(c);
        }
    }

    candidates.sort_by(|a, b| {
        a.offset
            .partial_cmp(&b.offset)
            .unwrap_or(Ordering::Equal)
            .then(b.support.cmp(&a.support))
            .then(
                a.junction
                    .corner
                    .v
                    .partial_cmp(&b.junction.corner.v)
                    .unwrap_or(Ordering::Equal),
            )
            .then(
                a.junction
                    .corner
                    .u
                    .partial_cmp(&b.junction.corner.u)
                    .unwrap_or(Ordering::Equal),
            )
    });
    let mut accepted: Vec<LShapeJunction> = Vec::new();
    for c in candidates {
        if accepted.len() >= config.max_junctions {
            break;
        }
        let clash = accepted
            .iter()
            .any(|j| j.corner.distance(c.junction.corner) <= r as f64);
        if !clash {
            accepted.push(c.junction);
        }
    }
    accepted
}

/// Rejects windows whose pixels are close to a single line.
fn spread_in_two_directions(pts: &[Vector2<f64>]) -> bool {
    let n = pts.len() as f64;
    let mean = pts.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in pts {
        let d = p - mean;
        sxx += d.x * d.x;
        syy += d.y * d.y;
        sxy += d.x * d.y;
    }
    let tr = sxx + syy;
    let disc = ((sxx - syy) * (sxx - syy) + 4.0 * sxy * sxy).sqrt();
    let (lmax, lmin) = ((tr + disc) * 0.5, (tr - disc) * 0.5);
    lmax > 0.0 && lmin / lmax > 0.05
}

fn line_distance(p: &Vector2<f64>, origin: &Vector2<f64>, dir: &Vector2<f64>) -> f64 {
    let d = p - origin;
    (d.x * dir.y - d.y * dir.x).abs()
}

fn ransac_line(
    pts: &[Vector2<f64>],
    rng: &mut ChaCha8Rng,
    iterations: usize,
    tol: f64,
) -> Option<(Vector2<f64>, Vector2<f64>, Vec<usize>)> {
    if pts.len() < 2 {
        return None;
    }
    // MSAC scoring: truncated quadratic cost, so staircase-slanted lines that
    // scrape extra inliers lose to exact fits.
    let mut best: Option<(f64, Vector2<f64>, Vector2<f64>)> = None;
    for _ in 0..iterations {
        let a = rng.random_range(0..pts.len());
        let b = rng.random_range(0..pts.len());
        let d = pts[b] - pts[a];
        if a == b || d.norm() < 1.5 {
            continue;
        }
        let dir = d.normalize();
        let cost: f64 = pts
            .iter()
            .map(|p| line_distance(p, &pts[a], &dir).powi(2).min(tol * tol))
            .sum();
        if best.is_none_or(|(c, _, _)| cost < c) {
            best = Some((cost, pts[a], dir));
        }
    }
    let (_, mut origin, mut dir) = best?;
    let mut inliers: Vec<usize> = (0..pts.len())
        .filter(|&i| line_distance(&pts[i], &origin, &dir) <= tol)
        .collect();
    if inliers.len() >= 2 {
        let sel: Vec<Vector2<f64>> = inliers.iter().map(|&i| pts[i]).collect();
        (origin, dir) = tls_line(&sel);
        inliers = (0..pts.len())
            .filter(|&i| line_distance(&pts[i], &origin, &dir) <= tol)
            .collect();
    }
    Some((origin, dir, inliers))
}

/// Principal direction of `pts` about a fixed `origin`.
fn direction_through(origin: &Vector2<f64>, pts: &[Vector2<f64>]) -> Vector2<f64> {
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in pts {
        let d = p - origin;
        sxx += d.x * d.x;
        syy += d.y * d.y;
        sxy += d.x * d.y;
    }
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    Vector2::new(theta.cos(), theta.sin())
}

/// Total-least-squares line `(centroid, direction)`.
fn tls_line(pts: &[Vector2<f64>]) -> (Vector2<f64>, Vector2<f64>) {
    let n = pts.len() as f64;
    let c = pts.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    (c, direction_through(&c, pts))
}

fn intersect(o1: &Vector2<f64>, d1: &Vector2<f64>, o2: &Vector2<f64>, d2: &Vector2<f64>) -> Option<Vector2<f64>> {
    let den = d1.x * d2.y - d1.y * d2.x;
    if den.abs() < 1e-9 {
        return None;
    }
    let w = o2 - o1;
    let s = (w.x * d2.y - w.y * d2.x) / den;
    Some(o1 + d1 * s)
}

/// Longest run of consecutive points (sorted along `dir`) without gaps larger
/// than 1.5 px.
fn longest_run(pts: &[Vector2<f64>], origin: &Vector2<f64>, dir: &Vector2<f64>) -> Vec<Vector2<f64>> {
    let mut proj: Vec<(f64, Vector2<f64>)> = pts.iter().map(|p| ((p - origin).dot(dir), *p)).collect();
    proj.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
    let (mut best_start, mut best_len, mut start) = (0, 0, 0);
    for i in 0..proj.len() {
        if i > 0 && (proj[i].1 - proj[i - 1].1).norm() > 1.5 {
            start = i;
        }
        if i + 1 - start > best_len {
            best_len = i + 1 - start;
            best_start = start;
        }
    }
    proj[best_start..best_start + best_len].iter().map(|p| p.1).collect()
}

fn fit_junction(
    edges: &EdgeMap,
    window: &[Vector2<f64>],
    center: Vector2<f64>,
    min_len: usize,
    config: &LShapeConfig,
    seed: u64,
) -> Option<Candidate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = config.inlier_tolerance;
    let (o1, d1, in1) = ransac_line(window, &mut rng, config.ransac_iterations, tol)?;
    let rest: Vec<Vector2<f64>> = (0..window.len())
        .filter(|i| !in1.contains(i))
        .map(|i| window[i])
        .collect();
    if in1.len() < min_len || rest.len() < min_len {
        return None;
    }
    let (o2, d2, in2) = ransac_line(&rest, &mut rng, config.ransac_iterations, tol)?;
    if in2.len() < min_len {
        return None;
    }
    let seg1 = longest_run(&in1.iter().map(|&i| window[i]).collect::<Vec<_>>(), &o1, &d1);
    let seg2 = longest_run(&in2.iter().map(|&i| rest[i]).collect::<Vec<_>>(), &o2, &d2);
    if seg1.len() < min_len || seg2.len() < min_len {
        return None;
    }
    let (c1, l1) = tls_line(&seg1);
    let (c2, l2) = tls_line(&seg2);
    let x = intersect(&c1, &l1, &c2, &l2)?;
    let offset = (x - center).norm();
    if offset > 1.5 {
        return None;
    }
    // Refine each arm on pixels away from the corner, where blur rounding and
    // suppression steps no longer bend the edge.
    let reach = 2.0 * r_of(config);
    let mut lines = [(c1, l1), (c2, l2)];
    let mut x = x;
    for _ in 0..2 {
        for line in lines.iter_mut() {
            let mut dir = line.1;
            if (line.0 - x).dot(&dir) < 0.0 {
                dir = -dir;
            }
            let far = arm_pixels(edges, &x, &dir, 4.0, reach);
            if far.len() < min_len {
                return None;
            }
            let mut fit = tls_line(&far);
            for _ in 0..4 {
                let tight: Vec<Vector2<f64>> = far
                    .iter()
                    .filter(|p| line_distance(p, &fit.0, &fit.1) <= 0.5)
                    .copied()
                    .collect();
                if tight.len() < min_len {
                    return None;
                }
                fit = tls_line(&tight);
            }
            *line = fit;
        }
        x = intersect(&lines[0].0, &lines[0].1, &lines[1].0, &lines[1].1)?;
    }
    if (x - center).norm() > 2.5 {
        return None;
    }
    let corner = nearest_edge_pixel(edges, &x)?;

    let mut dirs = [Vector2::zeros(); 2];
    let mut kept: [Vec<Pixel>; 2] = [Vec::new(), Vec::new()];
    for (k, (o, l)) in lines.iter().enumerate() {
        let dir = if (o - x).dot(l) < 0.0 { -l } else { *l };
        // L, not T or X: nothing may continue past the corner.
        if arm_pixels(edges, &x, &-dir, 3.0, reach).len() >= min_len {
            return None;
        }
        // Pixels bent off the line near the corner are dropped so the arm's
        // end points follow the fitted edge.
        let mut pts: Vec<(f64, Pixel)> = arm_pixels(edges, &x, &dir, 0.5, reach)
            .into_iter()
            .filter(|p| line_distance(p, o, l) <= 0.5)
            .map(|p| ((p - x).dot(&dir), Pixel::new(p.x, p.y)))
            .collect();
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
        if pts.len() < min_len || pts[0].0 > 5.0 {
            return None;
        }
        dirs[k] = dir;
        kept[k] = pts.into_iter().map(|p| p.1).collect();
    }
    let angle = dirs[0].dot(&dirs[1]).clamp(-1.0, 1.0).acos();
    if !(config.min_angle..=config.max_angle).contains(&angle) {
        return None;
    }
    let [pts1, pts2] = kept;
    let support = pts1.len() + pts2.len();
    Some(Candidate {
        junction: LShapeJunction {
            corner: Pixel::new(corner.x, corner.y),
            dir1: dirs[0],
            dir2: dirs[1],
            pts1,
            pts2,
            expected_angle: angle,
        },
        offset,
        support,
    })
}

fn r_of(config: &LShapeConfig) -> f64 {
    config.window_radius.max(2) as f64
}

/// Edge pixels within `SEGMENT_TOLERANCE` of the ray `origin + s·dir`,
/// `s ∈ [from, to]`, stopping at the first gap wider than 2 px.
fn arm_pixels(edges: &EdgeMap, origin: &Vector2<f64>, dir: &Vector2<f64>, from: f64, to: f64) -> Vec<Vector2<f64>> {
    let mut found: Vec<(f64, Vector2<f64>)> = Vec::new();
    let end = origin + dir * to;
    let pad = SEGMENT_TOLERANCE.ceil() as i64 + 1;
    let (x0, x1) = (
        origin.x.min(end.x).floor() as i64 - pad,
        origin.x.max(end.x).ceil() as i64 + pad,
    );
    let (y0, y1) = (
        origin.y.min(end.y).floor() as i64 - pad,
        origin.y.max(end.y).ceil() as i64 + pad,
    );
    for y in y0..=y1 {
        for xx in x0..=x1 {
            if !edges.contains(xx, y) {
                continue;
            }
            let p = Vector2::new(xx as f64, y as f64);
            let s = (p - origin).dot(dir);
            if s >= from && s <= to && line_distance(&p, origin, dir) <= SEGMENT_TOLERANCE {
                found.push((s, p));
            }
        }
    }
    found.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
    let mut out = Vec::with_capacity(found.len());
    let mut last = from;
    for (s, p) in found {
        if s - last > 2.0 {
            break;
        }
        last = last.max(s);
        out.push(p);
    }
    out
}

fn nearest_edge_pixel(edges: &EdgeMap, x: &Vector2<f64>) -> Option<Vector2<f64>> {
    let (cx, cy) = (x.x.round() as i64, x.y.round() as i64);
    let mut best: Option<(f64, Vector2<f64>)> = None;
    for dy in -2..=2 {
        for dx in -2..=2 {
            if edges.contains(cx + dx, cy + dy) {
                let p = Vector2::new((cx + dx) as f64, (cy + dy) as f64);
                let d = (p - x).norm();
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, p));
                }
            }
        }
    }
    best.map(|b| b.1)
}
