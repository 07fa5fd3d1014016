//! TUM RGB-D text formats: `rgb.txt` / `depth.txt` indexes and
//! `timestamp tx ty tz qx qy qz qw` trajectories.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use edgeslam_core::eval::associate_timestamps;
use edgeslam_core::Pose;
use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub timestamp: f64,
    /// Relative to the dataset root.
    pub path: PathBuf,
}

fn parse_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Dataset(format!("{}:{line}: {msg}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::dataset_io(path, e))
}

/// Non-empty, non-comment lines with their 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_f64(path: &Path, line: usize, field: &str) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| parse_err(path, line, format!("not a number: {field:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("non-finite value {field:?}")));
    }
    Ok(v)
}

fn check_increasing(path: &Path, prev: Option<f64>, t: f64, line: usize) -> Result<()> {
    match prev {
        Some(p) if t <= p => Err(parse_err(path, line, format!("timestamp {t} not after {p}"))),
        _ => Ok(()),
    }
}

pub fn parse_index(path: &Path, text: &str) -> Result<Vec<IndexEntry>> {
    let mut out: Vec<IndexEntry> = Vec::new();
    for (n, line) in data_lines(text) {
        let mut it = line.split_whitespace();
        let (Some(ts), Some(file), None) = (it.next(), it.next(), it.next()) else {
            return Err(parse_err(path, n, "expected `timestamp filename`"));
        };
        let timestamp = parse_f64(path, n, ts)?;
        check_increasing(path, out.last().map(|e| e.timestamp), timestamp, n)?;
        out.push(IndexEntry {
            timestamp,
            path: PathBuf::from(file),
        });
    }
    Ok(out)
}

pub fn read_index(path: &Path) -> Result<Vec<IndexEntry>> {
    parse_index(path, &read_text(path)?)
}

/// Parses a TUM trajectory; quaternions are normalized.
pub fn parse_trajectory(path: &Path, text: &str) -> Result<Vec<(f64, Pose)>> {
    let mut out: Vec<(f64, Pose)> = Vec::new();
    for (n, line) in data_lines(text) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(parse_err(path, n, format!("expected 8 fields, found {}", fields.len())));
        }
        let mut v = [0.0; 8];
        for (x, f) in v.iter_mut().zip(&fields) {
            *x = parse_f64(path, n, f)?;
        }
        check_increasing(path, out.last().map(|s| s.0), v[0], n)?;
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        if !(q.norm() > 1e-9) {
            return Err(parse_err(path, n, "zero quaternion"));
        }
        let pose = Pose::from_quaternion(&UnitQuaternion::from_quaternion(q), Vector3::new(v[1], v[2], v[3]));
        out.push((v[0], pose));
    }
    Ok(out)
}

pub fn read_trajectory(path: &Path) -> Result<Vec<(f64, Pose)>> {
    parse_trajectory(path, &read_text(path)?)
}

/// One trajectory line; the quaternion is written with `qw ≥ 0`.
pub fn format_pose_line(timestamp: f64, pose: &Pose) -> String {
    let q = pose.quaternion();
    let mut c = q.coords;
    if c.w < 0.0 {
        c = -c;
    }
    let t = pose.translation;
    format!(
        "{timestamp:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
        t.x, t.y, t.z, c.x, c.y, c.z, c.w
    )
}

pub fn format_trajectory(samples: &[(f64, Pose)]) -> String {
    let mut s = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for (t, p) in samples {
        writeln!(s, "{}", format_pose_line(*t, p)).unwrap();
    }
    s
}

pub fn write_trajectory(path: &Path, samples: &[(f64, Pose)]) -> Result<()> {
    fs::write(path, format_trajectory(samples)).map_err(|e| Error::io(path, e))
}

pub fn format_index(header: &str, entries: &[IndexEntry]) -> String {
    let mut s = format!("# {header}\n# timestamp filename\n");
    for e in entries {
        writeln!(s, "{:.6} {}", e.timestamp, e.path.display()).unwrap();
    }
    s
}

/// One RGB image paired with its nearest depth image.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePair {
    pub timestamp: f64,
    pub rgb: PathBuf,
    pub depth: Option<PathBuf>,
}

/// Nearest-timestamp pairing of the two indexes; returns the pairs in RGB
/// order and the number of RGB entries left without depth.
pub fn associate_rgb_depth(rgb: &[IndexEntry], depth: &[IndexEntry], max_dt: f64) -> (Vec<FramePair>, usize) {
    let a: Vec<f64> = rgb.iter().map(|e| e.timestamp).collect();
    let b: Vec<f64> = depth.iter().map(|e| e.timestamp).collect();
    let pairs = associate_timestamps(&a, &b, max_dt);
    let dropped = rgb.len() - pairs.len();
    let frames = pairs
        .into_iter()
        .map(|(i, j)| FramePair {
            timestamp: rgb[i].timestamp,
            rgb: rgb[i].path.clone(),
            depth: Some(depth[j].path.clone()),
        })
        .collect();
    (frames, dropped)
}
