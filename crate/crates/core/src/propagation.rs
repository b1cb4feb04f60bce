//! Turning per-node routing probabilities into level assignments.
//!
//! Outputs are node-probability vectors indexed by heap id (slot 0 unused), so
//! level `h` is the slice `2^h .. 2^(h+1)`.
//!
//! * Product: `P(child) = P(parent) * z`, one level at a time.
//! * Learned: a shared perceptron reads the routing probabilities of the
//!   branches taken along a leaf's path (root first) and emits a leaf logit,
//!   offset by a per-leaf bias. Leaves are softmax-normalized; internal nodes
//!   are the sums of their children.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{axpy, dot, init_fan_in, softmax_backward, softmax_in_place, Block, Layout};
use crate::split::dropout_mask;
use crate::tree::Topology;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PropagationConfig {
    Product {},
    Learned {
        hidden: usize,
        #[serde(default)]
        dropout: f64,
    },
}

impl PropagationConfig {
    pub fn name(&self) -> &'static str {
        match self {
            PropagationConfig::Product {} => "product",
            PropagationConfig::Learned { .. } => "learned",
        }
    }
}

#[derive(Debug, Clone)]
struct LearnedBlocks {
    w1: Block,
    b1: Block,
    w2: Block,
    leaf_bias: Block,
    hidden: usize,
    dropout: f64,
}

#[derive(Debug, Clone)]
pub struct Propagation {
    topology: Topology,
    learned: Option<LearnedBlocks>,
}

#[derive(Debug, Clone)]
pub enum PropagationCache {
    Product { zl: Vec<f64>, probs: Vec<f64> },
    Learned { zl: Vec<f64>, u: Vec<f64>, pre: Vec<f64>, h: Vec<f64>, mask: Option<Vec<f64>>, leaves: Vec<f64> },
}

impl Propagation {
    pub fn new(config: &PropagationConfig, topology: Topology, layout: &mut Layout) -> Result<Self> {
        let learned = match *config {
            PropagationConfig::Product {} => None,
            PropagationConfig::Learned { hidden, dropout } => {
                if hidden == 0 {
                    return Err(Error::Config("propagation hidden width must be positive".into()));
                }
                if !(0.0..1.0).contains(&dropout) {
                    return Err(Error::Config(format!("propagation dropout {dropout} not in [0, 1)")));
                }
                let d = topology.depth();
                Some(LearnedBlocks {
                    w1: layout.alloc(hidden * d),
                    b1: layout.alloc(hidden),
                    w2: layout.alloc(hidden),
                    leaf_bias: layout.alloc(topology.leaf_count()),
                    hidden,
                    dropout,
                })
            }
        };
        Ok(Self { topology, learned })
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn init(&self, p: &mut [f64], rng: &mut impl Rng) {
        if let Some(b) = &self.learned {
            init_fan_in(p, b.w1, self.topology.depth(), rng);
            init_fan_in(p, b.w2, b.hidden, rng);
        }
    }

    /// `zl[t - 1]` is the left-routing probability of split node `t`.
    /// Dropout (learned variant only) is active iff `rng` is given.
    pub fn forward<R: Rng>(&self, p: &[f64], zl: &[f64], rng: Option<&mut R>) -> (Vec<f64>, PropagationCache) {
        debug_assert_eq!(zl.len(), self.topology.split_count());
        match &self.learned {
            None => {
                let probs = propagate_product(zl, self.topology);
                (probs.clone(), PropagationCache::Product { zl: zl.to_vec(), probs })
            }
            Some(b) => {
                let depth = self.topology.depth();
                let n_leaves = self.topology.leaf_count();
                let hd = b.hidden;
                let (w1, b1, w2, lb) = (b.w1.of(p), b.b1.of(p), b.w2.of(p), b.leaf_bias.of(p));
                let u = path_features(zl, self.topology);
                let mut pre = vec![0.0; n_leaves * hd];
                for j in 0..n_leaves {
                    let uj = &u[j * depth..(j + 1) * depth];
                    for q in 0..hd {
                        pre[j * hd + q] = dot(&w1[q * depth..(q + 1) * depth], uj) + b1[q];
                    }
                }
                let mut h: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
                let mask = match rng {
                    Some(rng) if b.dropout > 0.0 => {
                        let m = dropout_mask(h.len(), b.dropout, rng);
                        h.iter_mut().zip(&m).for_each(|(v, m)| *v *= m);
                        Some(m)
                    }
                    _ => None,
                };
                let mut leaves: Vec<f64> =
                    (0..n_leaves).map(|j| dot(w2, &h[j * hd..(j + 1) * hd]) + lb[j]).collect();
                softmax_in_place(&mut leaves);
                let probs = sum_up(&leaves, self.topology);
                (probs, PropagationCache::Learned { zl: zl.to_vec(), u, pre, h, mask, leaves })
            }
        }
    }

    /// Returns the gradient w.r.t. the left-routing probabilities and
    /// accumulates parameter gradients into `grad`.
    pub fn backward(&self, p: &[f64], cache: &PropagationCache, dprobs: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let n_split = self.topology.split_count();
        let mut dzl = vec![0.0; n_split];
        match (&self.learned, cache) {
            (None, PropagationCache::Product { zl, probs }) => {
                let mut acc = dprobs.to_vec();
                for t in (1..=n_split).rev() {
                    let z = zl[t - 1];
                    let (dl, dr) = (acc[2 * t], acc[2 * t + 1]);
                    dzl[t - 1] = probs[t] * (dl - dr);
                    acc[t] += dl * z + dr * (1.0 - z);
                }
            }
            (Some(b), PropagationCache::Learned { zl: _, u, pre, h, mask, leaves }) => {
                let depth = self.topology.depth();
                let hd = b.hidden;
                // every node's probability is a sum of the leaves below it
                let mut acc = dprobs.to_vec();
                for t in 2..acc.len() {
                    acc[t] += acc[t >> 1];
                }
                let first = self.topology.leaf_count();
                let mut dlogit = vec![0.0; first];
                softmax_backward(leaves, &acc[first..], &mut dlogit);
                axpy(1.0, &dlogit, b.leaf_bias.of_mut(grad));
                let (w1, w2) = (b.w1.of(p), b.w2.of(p));
                let mut dpre = vec![0.0; hd];
                for j in 0..first {
                    let g = dlogit[j];
                    if g == 0.0 {
                        continue;
                    }
                    axpy(g, &h[j * hd..(j + 1) * hd], b.w2.of_mut(grad));
                    for q in 0..hd {
                        let i = j * hd + q;
                        let m = mask.as_ref().map_or(1.0, |m| m[i]);
                        dpre[q] = if pre[i] > 0.0 { g * w2[q] * m } else { 0.0 };
                    }
                    let uj = &u[j * depth..(j + 1) * depth];
                    {
                        let gw1 = b.w1.of_mut(grad);
                        for q in 0..hd {
                            if dpre[q] != 0.0 {
                                axpy(dpre[q], uj, &mut gw1[q * depth..(q + 1) * depth]);
                            }
                        }
                    }
                    axpy(1.0, &dpre, b.b1.of_mut(grad));
                    let leaf = first + j;
                    for k in 0..depth {
                        let du: f64 = (0..hd).map(|q| dpre[q] * w1[q * depth + k]).sum();
                        let anc = leaf >> (depth - k);
                        let went_right = (leaf >> (depth - k - 1)) & 1 == 1;
                        dzl[anc - 1] += if went_right { -du } else { du };
                    }
                }
            }
            _ => unreachable!("propagation cache mismatch"),
        }
        dzl
    }
}

/// Product propagation, evaluated one level at a time.
pub fn propagate_product(zl: &[f64], topology: Topology) -> Vec<f64> {
    let mut probs = vec![0.0; topology.node_count() + 1];
    probs[1] = 1.0;
    for h in 0..topology.depth() {
        for t in topology.level_nodes(h) {
            let z = zl[t - 1];
            probs[2 * t] = probs[t] * z;
            probs[2 * t + 1] = probs[t] * (1.0 - z);
        }
    }
    probs
}

/// Routing probability of the branch taken at each ancestor, per leaf
/// (`leaf_count x depth`, root first).
pub fn path_features(zl: &[f64], topology: Topology) -> Vec<f64> {
    let depth = topology.depth();
    let mut u = Vec::with_capacity(topology.leaf_count() * depth);
    for leaf in topology.leaves() {
        for k in 0..depth {
            let anc = leaf >> (depth - k);
            let z = zl[anc - 1];
            u.push(if (leaf >> (depth - k - 1)) & 1 == 1 { 1.0 - z } else { z });
        }
    }
    u
}

/// Fills internal nodes bottom-up from a leaf distribution.
pub fn sum_up(leaves: &[f64], topology: Topology) -> Vec<f64> {
    let first = topology.leaf_count();
    let mut probs = vec![0.0; 2 * first];
    probs[first..].copy_from_slice(leaves);
    for t in (1..first).rev() {
        probs[t] = probs[2 * t] + probs[2 * t + 1];
    }
    probs
}

/// Level `h` of a node-probability vector.
pub fn level_slice(probs: &[f64], h: usize) -> &[f64] {
    &probs[1 << h..1 << (h + 1)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn product(zl: &[f64], depth: usize) -> Vec<f64> {
        propagate_product(zl, Topology::new(depth).unwrap())
    }

    #[test]
    fn uniform_routes_give_uniform_leaves() {
        let p = product(&[0.5; 3], 2);
        assert_eq!(level_slice(&p, 2), &[0.25; 4]);
    }

    #[test]
    fn hand_computed_products() {
        let p = product(&[0.7, 0.6, 0.9], 2);
        let want = [0.42, 0.28, 0.27, 0.03];
        for (a, b) in level_slice(&p, 2).iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((p[2] - 0.7).abs() < 1e-15 && (p[3] - 0.3).abs() < 1e-15);
        assert_eq!(p[1], 1.0);
    }

    fn learned(depth: usize, hidden: usize) -> (Propagation, Vec<f64>) {
        let mut layout = Layout::new();
        let prop = Propagation::new(
            &PropagationConfig::Learned { hidden, dropout: 0.0 },
            Topology::new(depth).unwrap(),
            &mut layout,
        )
        .unwrap();
        let mut p = vec![0.0; layout.len()];
        prop.init(&mut p, &mut ChaCha8Rng::seed_from_u64(11));
        (prop, p)
    }

    #[test]
    fn learned_zero_params_is_uniform() {
        let (prop, p) = learned(3, 4);
        let zeros = vec![0.0; p.len()];
        let (probs, _) = prop.forward::<ChaCha8Rng>(&zeros, &[0.9, 0.2, 0.4, 0.5, 0.1, 0.7, 0.3], None);
        assert!(level_slice(&probs, 3).iter().all(|&v| (v - 0.125).abs() < 1e-15));
        assert!((probs[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn learned_leaf_bias_concentrates_mass() {
        let (prop, mut p) = learned(3, 4);
        let b = prop.learned.as_ref().unwrap().leaf_bias;
        b.of_mut(&mut p)[5] = 30.0;
        let (probs, _) = prop.forward::<ChaCha8Rng>(&p, &[0.5; 7], None);
        let leaf = 8 + 5;
        assert!(probs[leaf] > 0.999);
        for a in Topology::new(3).unwrap().ancestors(leaf).unwrap() {
            assert!(probs[a] >= probs[leaf]);
        }
    }

    #[test]
    fn path_features_use_taken_branch() {
        let topo = Topology::new(2).unwrap();
        let u = path_features(&[0.7, 0.6, 0.9], topo);
        assert_eq!(u, vec![0.7, 0.6, 0.7, 1.0 - 0.6, 1.0 - 0.7, 0.9, 1.0 - 0.7, 1.0 - 0.9]);
        // product of the features is the product-propagated leaf probability
        let p = propagate_product(&[0.7, 0.6, 0.9], topo);
        for j in 0..4 {
            assert!((u[2 * j] * u[2 * j + 1] - p[4 + j]).abs() < 1e-15);
        }
    }
}
