//! Vantage-point tree over Hamming space with exact two-nearest-neighbour
//! queries.
//!
//! Results are ordered by `(distance, index)` so that a tree query returns
//! exactly what a linear scan returns, ties included.

use alloc::vec::Vec;

use super::Descriptor;

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone)]
enum Node {
    Leaf(Vec<usize>),
    Split {
        vantage: usize,
        radius: u32,
        inside: Option<usize>,
        outside: Option<usize>,
    },
}

#[derive(Debug, Clone)]
pub struct VpTree {
    points: Vec<Descriptor>,
    nodes: Vec<Node>,
    root: Option<usize>,
}

/// Up to two nearest neighbours, `(distance, index)` ascending.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Nearest2 {
    pub first: Option<(u32, usize)>,
    pub second: Option<(u32, usize)>,
}

impl Nearest2 {
    #[inline]
    pub(crate) fn offer(&mut self, d: u32, i: usize) {
        let cand = (d, i);
        match self.first {
            None => self.first = Some(cand),
            Some(f) if cand < f => {
                self.second = self.first;
                self.first = Some(cand);
            }
            Some(_) => match self.second {
                Some(s) if cand >= s => {}
                _ => self.second = Some(cand),
            },
        }
    }

    #[inline]
    fn bound(&self) -> u32 {
        self.second.map_or(u32::MAX, |s| s.0)
    }
}

impl VpTree {
    pub fn new(points: &[Descriptor]) -> Self {
        let mut tree = VpTree {
            points: points.to_vec(),
            nodes: Vec::new(),
            root: None,
        };
        let ids: Vec<usize> = (0..points.len()).collect();
        tree.root = tree.build(ids);
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> Descriptor {
        self.points[i]
    }

    fn build(&mut self, ids: Vec<usize>) -> Option<usize> {
        if ids.is_empty() {
            return None;
        }
        if ids.len() <= LEAF_SIZE {
            self.nodes.push(Node::Leaf(ids));
            return Some(self.nodes.len() - 1);
        }
        let vantage = ids[0];
        let vp = self.points[vantage];
        let rest = &ids[1..];
        let dists: Vec<u32> = rest.iter().map(|&i| vp.hamming(&self.points[i])).collect();
        let mut sorted = dists.clone();
        sorted.sort_unstable();
        let radius = sorted[sorted.len() / 2];
        let (mut inside, mut outside) = (Vec::new(), Vec::new());
        for (&i, &d) in rest.iter().zip(dists.iter()) {
            if d < radius {
                inside.push(i);
            } else {
                outside.push(i);
            }
        }
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf(Vec::new()));
        let inside = self.build(inside);
        let outside = self.build(outside);
        self.nodes[slot] = Node::Split {
            vantage,
            radius,
            inside,
            outside,
        };
        Some(slot)
    }

    pub fn nearest2(&self, query: &Descriptor) -> Nearest2 {
        let mut best = Nearest2::default();
        if let Some(root) = self.root {
            self.search(root, query, &mut best);
        }
        best
    }

    fn search(&self, node: usize, q: &Descriptor, best: &mut Nearest2) {
        match &self.nodes[node] {
            Node::Leaf(ids) => {
                for &i in ids {
                    best.offer(q.hamming(&self.points[i]), i);
                }
            }
            Node::Split {
                vantage,
                radius,
                inside,
                outside,
            } => {
                let d = q.hamming(&self.points[*vantage]);
                best.offer(d, *vantage);
                // Members of `inside` satisfy dist(vp, x) <= radius - 1, members
                // of `outside` dist(vp, x) >= radius; the triangle inequality
                // bounds dist(q, x) from below.
                let inside_lb = if *radius == 0 {
                    u32::MAX
                } else {
                    d.saturating_sub(radius - 1)
                };
                let outside_lb = radius.saturating_sub(d);
                let order = if d < *radius {
                    [(*inside, inside_lb), (*outside, outside_lb)]
                } else {
                    [(*outside, outside_lb), (*inside, inside_lb)]
                };
                for (child, lb) in order {
                    if let Some(c) = child {
                        if lb <= best.bound() {
                            self.search(c, q, best);
                        }
                    }
                }
            }
        }
    }
}

/// Linear scan with the same ordering as [`VpTree::nearest2`].
pub fn brute_force_nearest2(points: &[Descriptor], query: &Descriptor) -> Nearest2 {
    let mut best = Nearest2::default();
    for (i, p) in points.iter().enumerate() {
        best.offer(query.hamming(p), i);
    }
    best
}
