//! Perfect binary tree topology and per-level assignment vectors.
//!
//! Nodes use heap addressing: the root is `1`, the children of `t` are `2t`
//! and `2t + 1`, and level `h` holds nodes `2^h .. 2^(h+1)`. Split nodes are
//! `1 .. 2^D` and leaves are `2^D .. 2^(D+1)`. Parent, child and level lookups
//! are therefore pure integer arithmetic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the sum of an assignment's probabilities.
pub const ASSIGNMENT_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    depth: usize,
}

impl Topology {
    pub fn new(depth: usize) -> Result<Self> {
        if depth == 0 || depth > 30 {
            return Err(Error::Config(format!("tree depth must be in 1..=30, got {depth}")));
        }
        Ok(Self { depth })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Total node count, `2^(D+1) - 1`.
    pub fn node_count(&self) -> usize {
        (1 << (self.depth + 1)) - 1
    }

    pub fn split_count(&self) -> usize {
        (1 << self.depth) - 1
    }

    pub fn leaf_count(&self) -> usize {
        1 << self.depth
    }

    /// Heap ids of the nodes at level `h`.
    pub fn level_nodes(&self, h: usize) -> std::ops::Range<usize> {
        (1 << h)..(1 << (h + 1))
    }

    pub fn leaves(&self) -> std::ops::Range<usize> {
        self.level_nodes(self.depth)
    }

    pub fn split_nodes(&self) -> std::ops::Range<usize> {
        1..(1 << self.depth)
    }

    pub fn contains(&self, t: usize) -> bool {
        t >= 1 && t <= self.node_count()
    }

    fn check(&self, t: usize) -> Result<()> {
        if self.contains(t) {
            Ok(())
        } else {
            Err(Error::OutOfRange { node: t, depth: self.depth })
        }
    }

    pub fn is_leaf(&self, t: usize) -> bool {
        t >= (1 << self.depth) && self.contains(t)
    }

    /// Split nodes on the path from the root to `t`, root first.
    pub fn ancestors(&self, t: usize) -> Result<Vec<usize>> {
        self.check(t)?;
        let mut out = Vec::with_capacity(node_depth(t));
        let mut a = t >> 1;
        while a >= 1 {
            out.push(a);
            a >>= 1;
        }
        out.reverse();
        Ok(out)
    }

    pub fn lca_depth(&self, u: usize, v: usize) -> Result<usize> {
        self.check(u)?;
        self.check(v)?;
        Ok(node_depth(lca(u, v)))
    }

    /// Hop count of the shortest path between `u` and `v`.
    pub fn tree_distance(&self, u: usize, v: usize) -> Result<usize> {
        let l = self.lca_depth(u, v)?;
        Ok(node_depth(u) + node_depth(v) - 2 * l)
    }
}

/// Depth of a heap-addressed node (root is 0).
#[inline]
pub fn node_depth(t: usize) -> usize {
    debug_assert!(t >= 1);
    (usize::BITS - 1 - t.leading_zeros()) as usize
}

/// Lowest common ancestor of two heap-addressed nodes.
pub fn lca(mut u: usize, mut v: usize) -> usize {
    let (du, dv) = (node_depth(u), node_depth(v));
    if du > dv {
        u >>= du - dv;
    } else {
        v >>= dv - du;
    }
    while u != v {
        u >>= 1;
        v >>= 1;
    }
    u
}

/// A probability vector over the `2^h` nodes of level `h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    level: usize,
    probs: Vec<f32>,
}

impl Assignment {
    /// Validates length, sign and normalization (checked in 64-bit).
    pub fn new(level: usize, probs: Vec<f32>) -> Result<Self> {
        if probs.len() != 1 << level {
            return Err(Error::DimMismatch { expected: 1 << level, got: probs.len() });
        }
        let mut sum = 0.0f64;
        for &p in &probs {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::NonFinite(format!("assignment entry {p}")));
            }
            sum += p as f64;
        }
        if (sum - 1.0).abs() > ASSIGNMENT_TOL {
            return Err(Error::NonFinite(format!("assignment sums to {sum}")));
        }
        Ok(Self { level, probs })
    }

    pub fn from_f64(level: usize, probs: &[f64]) -> Result<Self> {
        Self::new(level, probs.iter().map(|&p| p as f32).collect())
    }

    pub fn one_hot(level: usize, index: usize) -> Self {
        let mut probs = vec![0.0; 1 << level];
        probs[index] = 1.0;
        Self { level, probs }
    }

    pub fn uniform(level: usize) -> Self {
        let n = 1usize << level;
        Self { level, probs: vec![1.0 / n as f32; n] }
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    pub fn argmax(&self) -> usize {
        argmax(self.probs.iter().map(|&p| p as f64))
    }
}

/// Negative total variation distance between two same-level assignments.
pub fn ntvd_sim(a: &Assignment, b: &Assignment) -> Result<f64> {
    if a.level != b.level {
        return Err(Error::LevelMismatch(a.level, b.level));
    }
    Ok(ntvd_f32(&a.probs, &b.probs))
}

/// `-0.5 * sum |a_l - b_l|` over raw slices, accumulated in 64-bit.
#[inline]
pub fn ntvd_f32(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let s: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum();
    -0.5 * s
}

#[inline]
pub fn ntvd_f64(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
    -0.5 * s
}

/// First index of the maximum; NaNs never win.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ancestors_follow_heap_halving() {
        let topo = Topology::new(3).unwrap();
        assert!(topo.ancestors(1).unwrap().is_empty());
        assert_eq!(topo.ancestors(5).unwrap(), vec![1, 2]);
        let first_leaf = 1 << 3;
        let path = topo.ancestors(first_leaf).unwrap();
        assert_eq!(path.len(), 3);
        assert_eq!(*path.last().unwrap(), 1 << 2);
        assert!(matches!(topo.ancestors(16), Err(Error::OutOfRange { .. })));
        assert!(matches!(topo.ancestors(0), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn level_ranges() {
        let topo = Topology::new(4).unwrap();
        assert_eq!(topo.node_count(), 31);
        for h in 0..=4 {
            assert_eq!(topo.level_nodes(h).len(), 1 << h);
            for t in topo.level_nodes(h) {
                assert_eq!(node_depth(t), h);
            }
        }
        assert_eq!(topo.split_nodes().len(), topo.split_count());
        assert!(Topology::new(0).is_err());
    }

    #[test]
    fn ntvd_examples() {
        let a = Assignment::new(1, vec![0.5, 0.5]).unwrap();
        let b = Assignment::new(1, vec![1.0, 0.0]).unwrap();
        assert!((ntvd_sim(&a, &b).unwrap() + 0.5).abs() < 1e-12);
        assert_eq!(ntvd_sim(&a, &a).unwrap(), 0.0);
        let l1 = Assignment::one_hot(2, 0);
        let l2 = Assignment::one_hot(2, 1);
        assert_eq!(ntvd_sim(&l1, &l2).unwrap(), -1.0);
        assert!(matches!(ntvd_sim(&a, &l1), Err(Error::LevelMismatch(1, 2))));
    }

    #[test]
    fn assignment_validation() {
        assert!(Assignment::new(1, vec![0.6, 0.6]).is_err());
        assert!(Assignment::new(1, vec![1.0]).is_err());
        assert!(Assignment::new(1, vec![1.5, -0.5]).is_err());
        assert!(Assignment::new(1, vec![0.3, 0.7]).is_ok());
    }

    #[test]
    fn lca_and_distance() {
        let topo = Topology::new(3).unwrap();
        assert_eq!(topo.lca_depth(8, 15).unwrap(), 0);
        assert_eq!(topo.lca_depth(4, 5).unwrap(), 1);
        assert_eq!(topo.lca_depth(9, 9).unwrap(), 3);
        assert_eq!(topo.tree_distance(6, 6).unwrap(), 0);
        assert_eq!(topo.tree_distance(3, 6).unwrap(), 1);
        assert_eq!(topo.tree_distance(8, 15).unwrap(), 6);
        assert!(topo.lca_depth(1, 99).is_err());
    }

    fn dist(n: usize) -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(0.01f32..1.0, n).prop_map(|v| {
            let s: f32 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn tvd_is_a_metric(a in dist(8), b in dist(8), c in dist(8)) {
            let d = |x: &[f32], y: &[f32]| -ntvd_f32(x, y);
            prop_assert!(d(&a, &b) >= 0.0);
            prop_assert!(d(&a, &a) == 0.0);
            prop_assert!((d(&a, &b) - d(&b, &a)).abs() < 1e-12);
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-9);
            prop_assert!(d(&a, &b) <= 1.0 + 1e-6);
        }

        #[test]
        fn distance_matches_path_walk(u in 1usize..64, v in 1usize..64) {
            let topo = Topology::new(5).unwrap();
            // walk up from the deeper node one hop at a time
            let (mut x, mut y, mut hops) = (u, v, 0);
            while x != y {
                if x > y { x >>= 1 } else { y >>= 1 }
                hops += 1;
            }
            prop_assert_eq!(topo.tree_distance(u, v).unwrap(), hops);
            prop_assert_eq!(topo.lca_depth(u, v).unwrap(), node_depth(x));
        }
    }
}
