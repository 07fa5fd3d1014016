//! Mutual nearest-neighbour descriptor matching under Hamming distance.

use alloc::vec::Vec;

use super::vptree::{brute_force_nearest2, Nearest2, VpTree};
use super::{Descriptor, Keypoint};

/// Below this many descriptors a linear scan beats building a tree.
pub const BRUTE_FORCE_LIMIT: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Match {
    pub index_i: usize,
    pub index_j: usize,
    pub hamming_distance: u32,
}

/// Read-only nearest-neighbour index over one frame's descriptors.
#[derive(Debug, Clone)]
pub enum DescriptorIndex {
    Linear(Vec<Descriptor>),
    Tree(VpTree),
}

impl DescriptorIndex {
    pub fn new(descriptors: Vec<Descriptor>) -> Self {
        if descriptors.len() < BRUTE_FORCE_LIMIT {
            DescriptorIndex::Linear(descriptors)
        } else {
            DescriptorIndex::Tree(VpTree::new(&descriptors))
        }
    }

    pub fn linear(descriptors: Vec<Descriptor>) -> Self {
        DescriptorIndex::Linear(descriptors)
    }

    pub fn tree(descriptors: Vec<Descriptor>) -> Self {
        DescriptorIndex::Tree(VpTree::new(&descriptors))
    }

    pub fn nearest2(&self, query: &Descriptor) -> Nearest2 {
        match self {
            DescriptorIndex::Linear(d) => brute_force_nearest2(d, query),
            DescriptorIndex::Tree(t) => t.nearest2(query),
        }
    }
}

/// Matches `a` against `b`.
///
/// A pair `(i, j)` is kept when `b[j]` is the unique nearest neighbour of
/// `a[i]`, `a[i]` is the unique nearest neighbour of `b[j]`, the distance is at
/// most `max_distance`, and the best distance is at most `ratio` times the
/// second best. Rejecting ties makes the result independent of input order.
pub fn match_descriptors(a: &[Keypoint], b: &[Keypoint], max_distance: u32, ratio: f64) -> Vec<Match> {
    let da: Vec<Descriptor> = a.iter().map(|k| k.descriptor).collect();
    let db: Vec<Descriptor> = b.iter().map(|k| k.descriptor).collect();
    let ia = DescriptorIndex::new(da.clone());
    let ib = DescriptorIndex::new(db);
    match_descriptors_with(&da, &ia, &ib, max_distance, ratio)
}

/// [`match_descriptors`] over prebuilt indices; `index_a` must index `a`.
pub fn match_descriptors_with(
    a: &[Descriptor],
    index_a: &DescriptorIndex,
    index_b: &DescriptorIndex,
    max_distance: u32,
    ratio: f64,
) -> Vec<Match> {
    let mut out = Vec::new();
    for (i, d) in a.iter().enumerate() {
        let nn = index_b.nearest2(d);
        let Some((d1, j)) = nn.first else {
            continue;
        };
        if d1 > max_distance {
            continue;
        }
        if let Some((d2, _)) = nn.second {
            if d1 == d2 || d1 as f64 > ratio * d2 as f64 {
                continue;
            }
        }
        let back = match index_b {
            DescriptorIndex::Linear(db) => index_a.nearest2(&db[j]),
            DescriptorIndex::Tree(t) => index_a.nearest2(&t.point(j)),
        };
        let unique_back = match (back.first, back.second) {
            (Some((b1, bi)), Some((b2, _))) => bi == i && b1 < b2,
            (Some((_, bi)), None) => bi == i,
            _ => false,
        };
        if unique_back {
            out.push(Match {
                index_i: i,
                index_j: j,
                hamming_distance: d1,
            });
        }
    }
    out
}
