//! Minimal owned image buffers and the filters the front end needs.

use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum ImageError {
    #[error("image is empty ({width}x{height})")]
    Empty { width: usize, height: usize },
    #[error("buffer length {len} does not match {width}x{height}")]
    BadBuffer { width: usize, height: usize, len: usize },
}

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if data.len() != width * height {
            return Err(ImageError::BadBuffer {
                width,
                height,
                len: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    /// Luminance conversion of interleaved 8-bit RGB (ITU-R BT.601 weights).
    pub fn from_rgb(width: usize, height: usize, rgb: &[u8]) -> Result<Self, ImageError> {
        if rgb.len() != width * height * 3 {
            return Err(ImageError::BadBuffer {
                width,
                height,
                len: rgb.len(),
            });
        }
        let data = rgb
            .chunks_exact(3)
            .map(|c| {
                let y = 0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64;
                y.round().clamp(0.0, 255.0) as u8
            })
            .collect();
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_clamped(&self, x: i64, y: i64) -> u8 {
        let xc = x.clamp(0, self.width as i64 - 1) as usize;
        let yc = y.clamp(0, self.height as i64 - 1) as usize;
        self.data[yc * self.width + xc]
    }

    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        self.data[y * self.width + x] = value;
    }

    pub fn to_float(&self) -> FloatImage {
        FloatImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    /// Bilinear resampling to `width`×`height`.
    pub fn resize(&self, width: usize, height: usize) -> GrayImage {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        GrayImage::from_fn(width, height, |x, y| {
            let fx = ((x as f64 + 0.5) * sx - 0.5).max(0.0);
            let fy = ((y as f64 + 0.5) * sy - 0.5).max(0.0);
            let x0 = (fx.floor() as usize).min(self.width - 1);
            let y0 = (fy.floor() as usize).min(self.height - 1);
            let x1 = (x0 + 1).min(self.width - 1);
            let y1 = (y0 + 1).min(self.height - 1);
            let ax = fx - x0 as f64;
            let ay = fy - y0 as f64;
            let top = self.get(x0, y0) as f64 * (1.0 - ax) + self.get(x1, y0) as f64 * ax;
            let bot = self.get(x0, y1) as f64 * (1.0 - ax) + self.get(x1, y1) as f64 * ax;
            (top * (1.0 - ay) + bot * ay).round().clamp(0.0, 255.0) as u8
        })
    }
}

/// Single-channel `f32` image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    fn get_reflect(&self, x: i64, y: i64) -> f32 {
        let xr = reflect(x, self.width as i64);
        let yr = reflect(y, self.height as i64);
        self.data[yr * self.width + xr]
    }

    /// Separable Gaussian blur with a kernel truncated at `3σ`.
    pub fn gaussian_blur(&self, sigma: f32) -> FloatImage {
        if sigma <= 0.0 {
            return self.clone();
        }
        let kernel = gaussian_kernel(sigma);
        let r = (kernel.len() / 2) as i64;
        let (w, h) = (self.width, self.height);
        let ru = r as usize;
        let mut tmp = FloatImage::zeros(w, h);
        for y in 0..h {
            let row = &self.data[y * w..(y + 1) * w];
            for x in 0..w {
                let mut acc = 0.0;
                if x >= ru && x + ru < w {
                    for (k, v) in kernel.iter().zip(&row[x - ru..=x + ru]) {
                        acc += k * v;
                    }
                } else {
                    for (i, k) in kernel.iter().enumerate() {
                        acc += k * self.get_reflect(x as i64 + i as i64 - r, y as i64);
                    }
                }
                tmp.data[y * w + x] = acc;
            }
        }
        let mut out = FloatImage::zeros(w, h);
        for y in 0..h {
            let inside = y >= ru && y + ru < h;
            for x in 0..w {
                let mut acc = 0.0;
                if inside {
                    for (i, k) in kernel.iter().enumerate() {
                        acc += k * tmp.data[(y + i - ru) * w + x];
                    }
                } else {
                    for (i, k) in kernel.iter().enumerate() {
                        acc += k * tmp.get_reflect(x as i64, y as i64 + i as i64 - r);
                    }
                }
                out.data[y * w + x] = acc;
            }
        }
        out
    }

    /// Sobel derivatives `(gx, gy)` with replicated borders.
    pub fn sobel(&self) -> (FloatImage, FloatImage) {
        let mut gx = FloatImage::zeros(self.width, self.height);
        let mut gy = FloatImage::zeros(self.width, self.height);
        let w = self.width as i64;
        let h = self.height as i64;
        let at = |x: i64, y: i64| self.data[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize];
        for y in 0..h {
            for x in 0..w {
                let dx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                    - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
                let dy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                    - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
                let i = (y * w + x) as usize;
                gx.data[i] = dx;
                gy.data[i] = dy;
            }
        }
        (gx, gy)
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect(),
        }
    }
}

fn reflect(i: i64, n: i64) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * n - 2;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma).ceil().max(1.0) as i32;
    let mut k: Vec<f32> = (-r..=r)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}
