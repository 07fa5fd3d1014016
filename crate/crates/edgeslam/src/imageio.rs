//! PNG reading and writing for color frames and 16-bit depth maps.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use edgeslam_core::depth::DepthMap;
use edgeslam_core::image::GrayImage;
use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};

/// Interleaved 8-bit RGB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_rgb(self.width, self.height, &self.data).expect("buffer matches dimensions")
    }
}

struct Decoded {
    width: usize,
    height: usize,
    color: ColorType,
    depth: BitDepth,
    data: Vec<u8>,
}

fn decode(path: &Path, transform: Transformations) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| Error::dataset_io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(transform);
    let mut reader = decoder.read_info().map_err(|e| Error::dataset_io(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::dataset_io(path, "image too large"))?;
    let mut data = vec![0; size];
    let info = reader.next_frame(&mut data).map_err(|e| Error::dataset_io(path, e))?;
    data.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        data,
    })
}

/// Any 8/16-bit gray or color PNG as RGB; alpha is dropped.
pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let d = decode(path, Transformations::EXPAND | Transformations::STRIP_16)?;
    let channels = match d.color {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Indexed => return Err(Error::dataset_io(path, "unexpanded palette image")),
    };
    let data = d
        .data
        .chunks_exact(channels)
        .flat_map(|p| if channels < 3 { [p[0]; 3] } else { [p[0], p[1], p[2]] })
        .collect();
    Ok(RgbImage {
        width: d.width,
        height: d.height,
        data,
    })
}

/// Raw 16-bit depth values of a single-channel PNG.
pub fn load_depth_raw(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let d = decode(path, Transformations::IDENTITY)?;
    if d.color != ColorType::Grayscale || d.depth != BitDepth::Sixteen {
        return Err(Error::dataset_io(
            path,
            format!("depth PNG must be 16-bit grayscale, found {:?} {:?}", d.color, d.depth),
        ));
    }
    let raw = d
        .data
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
        .collect();
    Ok((d.width, d.height, raw))
}

/// Depth in meters: `raw / scale_factor`, zero marks missing values.
pub fn load_depth(path: &Path, scale_factor: f64) -> Result<DepthMap> {
    let (w, h, raw) = load_depth_raw(path)?;
    DepthMap::from_raw(w, h, &raw, scale_factor).map_err(|e| Error::dataset_io(path, e))
}

fn encode(path: &Path, width: usize, height: usize, color: ColorType, depth: BitDepth, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let runtime = |e: png::EncodingError| Error::Runtime(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(runtime)?;
    writer.write_image_data(data).map_err(runtime)?;
    writer.finish().map_err(runtime)
}

pub fn save_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    encode(path, img.width, img.height, ColorType::Rgb, BitDepth::Eight, &img.data)
}

pub fn save_depth_raw(path: &Path, width: usize, height: usize, raw: &[u16]) -> Result<()> {
    let bytes: Vec<u8> = raw.iter().flat_map(|v| v.to_be_bytes()).collect();
    encode(path, width, height, ColorType::Grayscale, BitDepth::Sixteen, &bytes)
}
