//! Per-frame feature extraction: keypoints with binary descriptors, descriptor
//! matching, Canny edge maps and L-shaped edge junctions.

mod canny;
mod lshape;
mod matcher;
mod orb;
mod pattern;
mod vptree;

pub use canny::{detect_edges, CannyConfig, EdgeMap};
pub use lshape::{detect_lshape_junctions, LShapeConfig, LShapeJunction};
pub use matcher::{match_descriptors, match_descriptors_with, DescriptorIndex, Match, BRUTE_FORCE_LIMIT};
pub use orb::{detect_keypoints, OrbConfig, EDGE_BORDER};
pub use vptree::VpTree;

use crate::geometry::Pixel;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum FeatureError {
    #[error("image is empty")]
    EmptyImage,
    #[error("invalid thresholds: low {low} must be positive and below high {high}")]
    InvalidThresholds { low: f32, high: f32 },
}

/// 256-bit binary descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Descriptor(pub [u64; 4]);

impl Descriptor {
    pub const BITS: u32 = 256;

    #[inline]
    pub fn hamming(&self, other: &Descriptor) -> u32 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }

    pub fn bit(&self, i: usize) -> bool {
        self.0[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn flip(&mut self, i: usize) {
        self.0[i / 64] ^= 1u64 << (i % 64);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    /// Position in level-0 pixel coordinates.
    pub position: Pixel,
    pub response: f64,
    /// Orientation from the intensity centroid, radians.
    pub angle: f64,
    pub level: u8,
    pub descriptor: Descriptor,
}
