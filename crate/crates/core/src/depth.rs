//! Dense per-frame depth maps and sub-pixel sampling.

use alloc::vec::Vec;

use crate::geometry::Pixel;
#[allow(unused_imports)]
use num_traits::Float;

/// Depths above this are treated as invalid.
pub const MAX_DEPTH: f64 = 100.0;
/// TUM RGB-D convention: raw 16-bit value 5000 is one meter.
pub const TUM_DEPTH_SCALE: f64 = 5000.0;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum DepthError {
    #[error("buffer length {len} does not match {width}x{height}")]
    BadBuffer { width: usize, height: usize, len: usize },
    #[error("scale factor must be positive, got {0}")]
    BadScale(f64),
    #[error("pixel ({u}, {v}) is outside the {width}x{height} depth map")]
    OutOfBounds {
        u: f64,
        v: f64,
        width: usize,
        height: usize,
    },
}

/// Row-major depth grid in meters; `0` marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    scale_factor: f64,
    values: Vec<f64>,
}

impl DepthMap {
    /// From raw sensor units: `meters = raw / scale_factor`.
    pub fn from_raw(width: usize, height: usize, raw: &[u16], scale_factor: f64) -> Result<Self, DepthError> {
        if !(scale_factor > 0.0) {
            return Err(DepthError::BadScale(scale_factor));
        }
        let values = raw.iter().map(|&r| r as f64 / scale_factor).collect::<Vec<_>>();
        Self::from_meters(width, height, &values).map(|mut d| {
            d.scale_factor = scale_factor;
            d
        })
    }

    /// From metric values; non-finite, non-positive and out-of-range depths
    /// become invalid.
    pub fn from_meters(width: usize, height: usize, meters: &[f64]) -> Result<Self, DepthError> {
        if meters.len() != width * height {
            return Err(DepthError::BadBuffer {
                width,
                height,
                len: meters.len(),
            });
        }
        let values = meters
            .iter()
            .map(|&m| if m > 0.0 && m <= MAX_DEPTH { m } else { 0.0 })
            .collect();
        Ok(Self {
            width,
            height,
            scale_factor: 1.0,
            values,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut meters = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                meters.push(f(x, y));
            }
        }
        Self::from_meters(width, height, &meters).expect("sized by construction")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn scale_factor(&self) -> f64 {
        self.scale_factor
    }

    /// Depth at an integer pixel, `None` if invalid.
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let v = self.values[y * self.width + x];
        (v > 0.0).then_some(v)
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.0).count()
    }

    pub fn in_bounds(&self, u: Pixel) -> bool {
        u.u >= 0.0 && u.v >= 0.0 && u.u <= (self.width - 1) as f64 && u.v <= (self.height - 1) as f64
    }

    /// Bilinear interpolation over the four neighbours, renormalized over the
    /// valid ones. `Ok(None)` when every contributing neighbour is invalid.
    pub fn sample(&self, u: Pixel) -> Result<Option<f64>, DepthError> {
        if self.width == 0 || self.height == 0 || !self.in_bounds(u) {
            return Err(DepthError::OutOfBounds {
                u: u.u,
                v: u.v,
                width: self.width,
                height: self.height,
            });
        }
        let x0 = (u.u.floor() as usize).min(self.width - 1);
        let y0 = (u.v.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = u.u - x0 as f64;
        let ay = u.v - y0 as f64;
        let taps = [
            (x0, y0, (1.0 - ax) * (1.0 - ay)),
            (x1, y0, ax * (1.0 - ay)),
            (x0, y1, (1.0 - ax) * ay),
            (x1, y1, ax * ay),
        ];
        let (mut acc, mut wsum) = (0.0, 0.0);
        for (x, y, w) in taps {
            if w <= 0.0 {
                continue;
            }
            if let Some(d) = self.get(x, y) {
                acc += w * d;
                wsum += w;
            }
        }
        Ok((wsum > 0.0).then(|| acc / wsum))
    }

    /// Sample with the derivative of depth w.r.t. `(u, v)`; `None` unless all
    /// four neighbours are valid.
    pub fn sample_with_gradient(&self, u: Pixel) -> Option<(f64, f64, f64)> {
        if !self.in_bounds(u) {
            return None;
        }
        let x0 = (u.u.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (u.v.floor() as usize).min(self.height.saturating_sub(2));
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let ax = u.u - x0 as f64;
        let ay = u.v - y0 as f64;
        let (d00, d10, d01, d11) = (
            self.get(x0, y0)?,
            self.get(x1, y0)?,
            self.get(x0, y1)?,
            self.get(x1, y1)?,
        );
        let top = d00 + ax * (d10 - d00);
        let bot = d01 + ax * (d11 - d01);
        let d = top + ay * (bot - top);
        let du = (1.0 - ay) * (d10 - d00) + ay * (d11 - d01);
        let dv = bot - top;
        Some((d, du, dv))
    }
}
