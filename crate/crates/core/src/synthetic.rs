//! Planar synthetic scenes with exact depth, for tests and the `synth` tool.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::Vector3;

use crate::depth::DepthMap;
use crate::geometry::{CameraIntrinsics, Pixel, Point3, Pose};

/// World plane `normal · X = offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

impl Plane {
    pub fn new(normal: Vector3<f64>, offset: f64) -> Self {
        let n = normal.norm();
        Self {
            normal: normal / n,
            offset: offset / n,
        }
    }

    /// Camera-frame depth of the plane along pixel `px` for world-to-camera
    /// pose `t_cw`; `None` if the ray misses or hits behind the camera.
    pub fn depth_at(&self, k: &CameraIntrinsics, t_cw: &Pose, px: Pixel) -> Option<f64> {
        let r_wc = t_cw.rotation.transpose();
        let origin = t_cw.center();
        let dir = r_wc * k.normalize(px);
        let denom = self.normal.dot(&dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let lambda = (self.offset - self.normal.dot(&origin)) / denom;
        (lambda > 0.0).then_some(lambda)
    }

    /// World point seen at `px`.
    pub fn point_at(&self, k: &CameraIntrinsics, t_cw: &Pose, px: Pixel) -> Option<Point3> {
        let d = self.depth_at(k, t_cw, px)?;
        Some(t_cw.inverse().transform_point(&(k.normalize(px) * d)))
    }

    pub fn depth_map(&self, k: &CameraIntrinsics, t_cw: &Pose, width: usize, height: usize) -> DepthMap {
        DepthMap::from_fn(width, height, |x, y| {
            self.depth_at(k, t_cw, Pixel::new(x as f64, y as f64)).unwrap_or(0.0)
        })
    }
}

/// Union of planes; each ray sees the nearest one.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub planes: Vec<Plane>,
}

impl Scene {
    /// Camera looking down +z into a box: back wall at `depth`, floor,
    /// ceiling and side walls at `half_width` / `half_height`.
    pub fn room(depth: f64, half_width: f64, half_height: f64) -> Self {
        Self {
            planes: vec![
                Plane::new(Vector3::z(), depth),
                Plane::new(Vector3::y(), half_height),
                Plane::new(-Vector3::y(), half_height),
                Plane::new(Vector3::x(), half_width),
                Plane::new(-Vector3::x(), half_width),
            ],
        }
    }

    /// Nearest hit along `px` and the index of the plane hit.
    pub fn hit(&self, k: &CameraIntrinsics, t_cw: &Pose, px: Pixel) -> Option<(f64, usize)> {
        self.planes
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.depth_at(k, t_cw, px).map(|d| (d, i)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    pub fn depth_at(&self, k: &CameraIntrinsics, t_cw: &Pose, px: Pixel) -> Option<f64> {
        self.hit(k, t_cw, px).map(|h| h.0)
    }

    pub fn point_at(&self, k: &CameraIntrinsics, t_cw: &Pose, px: Pixel) -> Option<Point3> {
        let d = self.depth_at(k, t_cw, px)?;
        Some(t_cw.inverse().transform_point(&(k.normalize(px) * d)))
    }

    pub fn depth_map(&self, k: &CameraIntrinsics, t_cw: &Pose, width: usize, height: usize) -> DepthMap {
        DepthMap::from_fn(width, height, |x, y| {
            self.depth_at(k, t_cw, Pixel::new(x as f64, y as f64)).unwrap_or(0.0)
        })
    }
}
