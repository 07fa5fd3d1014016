//! Binary little-endian PLY point clouds: `float x y z`, `uchar red green blue`.

use std::fs;
use std::path::Path;

use edgeslam_core::Point3;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColoredPoint {
    pub position: Point3,
    pub color: [u8; 3],
}

const RECORD: usize = 15;

pub fn encode(points: &[ColoredPoint]) -> Vec<u8> {
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        points.len()
    );
    let mut out = Vec::with_capacity(header.len() + RECORD * points.len());
    out.extend_from_slice(header.as_bytes());
    for p in points {
        for v in p.position.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out.extend_from_slice(&p.color);
    }
    out
}

pub fn write(path: &Path, points: &[ColoredPoint]) -> Result<()> {
    fs::write(path, encode(points)).map_err(|e| Error::io(path, e))
}

/// Reads back files in the layout written by [`encode`].
pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<ColoredPoint>, String> {
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or("missing end_header")?
        + END.len();
    let header = std::str::from_utf8(&bytes[..end]).map_err(|e| e.to_string())?;
    if !header.starts_with("ply\nformat binary_little_endian 1.0\n") {
        return Err("not a binary little-endian PLY".into());
    }
    let count: usize = header
        .lines()
        .find_map(|l| l.strip_prefix("element vertex "))
        .ok_or("missing vertex element")?
        .parse()
        .map_err(|e: std::num::ParseIntError| e.to_string())?;
    let body = &bytes[end..];
    if body.len() != count * RECORD {
        return Err(format!(
            "expected {} bytes of vertex data, found {}",
            count * RECORD,
            body.len()
        ));
    }
    Ok(body
        .chunks_exact(RECORD)
        .map(|r| {
            let f = |i: usize| f32::from_le_bytes(r[4 * i..4 * i + 4].try_into().unwrap()) as f64;
            ColoredPoint {
                position: Point3::new(f(0), f(1), f(2)),
                color: [r[12], r[13], r[14]],
            }
        })
        .collect())
}
