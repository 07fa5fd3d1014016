//! Canny edge detection: Gaussian smoothing, Sobel gradient, non-maximum
//! suppression along the quantized gradient direction, and hysteresis.

use alloc::vec;
use alloc::vec::Vec;

use super::FeatureError;
use crate::image::GrayImage;
#[allow(unused_imports)]
use num_traits::Float;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CannyConfig {
    pub sigma: f32,
    pub low: f32,
    pub high: f32,
}

impl Default for CannyConfig {
    fn default() -> Self {
        Self {
            sigma: 1.4,
            low: 50.0,
            high: 150.0,
        }
    }
}

/// Set of edge pixels of one frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMap {
    width: usize,
    height: usize,
    mask: Vec<bool>,
    /// Edge pixels in raster order.
    pixels: Vec<(u32, u32)>,
}

impl EdgeMap {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            mask: vec![false; width * height],
            pixels: Vec::new(),
        }
    }

    /// Builds a map from explicit pixel coordinates; out-of-range pixels are dropped.
    pub fn from_pixels(width: usize, height: usize, pixels: impl IntoIterator<Item = (u32, u32)>) -> Self {
        let mut mask = vec![false; width * height];
        for (x, y) in pixels {
            if (x as usize) < width && (y as usize) < height {
                mask[y as usize * width + x as usize] = true;
            }
        }
        Self::from_mask(width, height, mask)
    }

    fn from_mask(width: usize, height: usize, mask: Vec<bool>) -> Self {
        let pixels = mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| ((i % width) as u32, (i / width) as u32))
            .collect();
        Self {
            width,
            height,
            mask,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[(u32, u32)] {
        &self.pixels
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.mask[y as usize * self.width + x as usize]
    }

    /// At most `cap` pixels taken at a uniform stride.
    pub fn subsample(&self, cap: usize) -> Vec<(u32, u32)> {
        if self.pixels.len() <= cap {
            return self.pixels.clone();
        }
        if cap == 0 {
            return Vec::new();
        }
        let n = self.pixels.len();
        (0..cap).map(|k| self.pixels[k * n / cap]).collect()
    }
}

pub fn detect_edges(image: &GrayImage, low: f32, high: f32, sigma: f32) -> Result<EdgeMap, FeatureError> {
    if !(low > 0.0 && low < high) {
        return Err(FeatureError::InvalidThresholds { low, high });
    }
    let (w, h) = (image.width(), image.height());
    if w < 3 || h < 3 {
        return Ok(EdgeMap::empty(w, h));
    }
    let smooth = image.to_float().gaussian_blur(sigma);
    let (gx, gy) = smooth.sobel();
    let mag: Vec<f32> = gx
        .data
        .iter()
        .zip(gy.data.iter())
        .map(|(a, b)| (a * a + b * b).sqrt())
        .collect();

    // 0: strong, 1: weak, 2: none
    let mut class = vec![2u8; w * h];
    let tan22 = (22.5f32).to_radians().tan();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            let m = mag[i];
            if m < low {
                continue;
            }
            let (dx, dy) = (gx.data[i], gy.data[i]);
            let (ax, ay) = (dx.abs(), dy.abs());
            // Neighbour offsets along the gradient direction.
            let (ox, oy): (i64, i64) = if ay <= tan22 * ax {
                (1, 0)
            } else if ax <= tan22 * ay {
                (0, 1)
            } else if (dx > 0.0) == (dy > 0.0) {
                (1, 1)
            } else {
                (1, -1)
            };
            let before = mag[((y as i64 - oy) * w as i64 + x as i64 - ox) as usize];
            let after = mag[((y as i64 + oy) * w as i64 + x as i64 + ox) as usize];
            // Asymmetric comparison thins two-pixel plateaus to one pixel; the
            // tolerance keeps float noise from flipping which side wins.
            let eps = 1e-4 * m;
            if m > before + eps && m >= after - eps {
                class[i] = if m >= high { 0 } else { 1 };
            }
        }
    }

    let mut edge = vec![false; w * h];
    let mut stack: Vec<usize> = Vec::new();
    for (i, &c) in class.iter().enumerate() {
        if c == 0 && !edge[i] {
            edge[i] = true;
            stack.push(i);
            while let Some(j) = stack.pop() {
                let (jx, jy) = ((j % w) as i64, (j / w) as i64);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (nx, ny) = (jx + dx, jy + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let n = ny as usize * w + nx as usize;
                        if !edge[n] && class[n] <= 1 {
                            edge[n] = true;
                            stack.push(n);
                        }
                    }
                }
            }
        }
    }
    Ok(EdgeMap::from_mask(w, h, edge))
}
