//! Baselines: hierarchical 2-way clustering trees (k-means, diagonal GMM)
//! with global tree search, the tree-free ablation and the cosine adapter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::Hit;
use crate::io::EmbeddingStore;
use crate::model::{derive_seed, reduce_chunks, BatchData, ModelConfig, Trainable, GRAD_CHUNK};
use crate::objective::{info_nce_cosine, level_losses, LevelMode, LossConfig};
use crate::params::{dot, softmax_backward, softmax_in_place, Layout};
use crate::propagation::{level_slice, sum_up};
use crate::split::{score_dropout, AggregatorKind, Input, PreparedGrad, SplitConfig, SplitFunction};
use crate::tree::{Assignment, Topology};

pub const KMEANS_MAX_ITER: usize = 100;
pub const KMEANS_TOL: f64 = 1e-4;
pub const GMM_MAX_ITER: usize = 100;
pub const GMM_TOL: f64 = 1e-6;
pub const VAR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterKind {
    Kmeans,
    Gmm,
}

fn normalized(v: &[f32]) -> Vec<f64> {
    let mut out: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    let n = dot(&out, &out).sqrt();
    if n > 0.0 {
        out.iter_mut().for_each(|x| *x /= n);
    }
    out
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Kmeans2 {
    pub centroids: [Vec<f64>; 2],
    /// 0 = left, 1 = right.
    pub labels: Vec<u8>,
    /// Within-cluster squared distance after each assignment step.
    pub objective: Vec<f64>,
}

fn nearest(c: &[Vec<f64>; 2], x: &[f64]) -> u8 {
    // ties go left
    (sq_dist(x, &c[1]) < sq_dist(x, &c[0])) as u8
}

/// Two-way Lloyd iterations with k-means++ seeding. `None` when the points
/// cannot be split (fewer than two distinct points).
pub fn kmeans2(points: &[Vec<f64>], seed: u64) -> Option<Kmeans2> {
    if points.len() < 2 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = points[rng.gen_range(0..points.len())].clone();
    let d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &first)).collect();
    let total: f64 = d2.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let mut u = rng.gen::<f64>() * total;
    let mut second = points.len() - 1;
    for (i, &d) in d2.iter().enumerate() {
        if u < d {
            second = i;
            break;
        }
        u -= d;
    }
    let mut c = [first, points[second].clone()];
    let dim = c[0].len();
    let mut labels = vec![0u8; points.len()];
    let mut objective = Vec::new();
    for _ in 0..KMEANS_MAX_ITER {
        let mut obj = 0.0;
        for (l, p) in labels.iter_mut().zip(points) {
            *l = nearest(&c, p);
            obj += sq_dist(p, &c[*l as usize]);
        }
        objective.push(obj);
        let mut sums = [vec![0.0; dim], vec![0.0; dim]];
        let mut counts = [0usize; 2];
        for (l, p) in labels.iter().zip(points) {
            counts[*l as usize] += 1;
            crate::params::axpy(1.0, p, &mut sums[*l as usize]);
        }
        let mut shift: f64 = 0.0;
        for j in 0..2 {
            if counts[j] == 0 {
                continue;
            }
            let next: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            shift = shift.max(sq_dist(&next, &c[j]).sqrt());
            c[j] = next;
        }
        if shift < KMEANS_TOL {
            break;
        }
    }
    let mut obj = 0.0;
    for (l, p) in labels.iter_mut().zip(points) {
        *l = nearest(&c, p);
        obj += sq_dist(p, &c[*l as usize]);
    }
    objective.push(obj);
    if labels.iter().all(|&l| l == labels[0]) {
        return None;
    }
    Some(Kmeans2 { centroids: c, labels, objective })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gmm2 {
    pub weights: [f64; 2],
    pub means: [Vec<f64>; 2],
    pub vars: [Vec<f64>; 2],
}

impl Gmm2 {
    fn log_joint(&self, x: &[f64]) -> [f64; 2] {
        let mut out = [0.0; 2];
        for j in 0..2 {
            let mut lp = self.weights[j].max(f64::MIN_POSITIVE).ln();
            for ((xi, m), v) in x.iter().zip(&self.means[j]).zip(&self.vars[j]) {
                lp -= 0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (xi - m) * (xi - m) / v);
            }
            out[j] = lp;
        }
        out
    }

    /// Posterior responsibilities and the point's log-likelihood.
    pub fn responsibilities(&self, x: &[f64]) -> ([f64; 2], f64) {
        let lj = self.log_joint(x);
        let m = lj[0].max(lj[1]);
        let z = (lj[0] - m).exp() + (lj[1] - m).exp();
        let ll = m + z.ln();
        ([(lj[0] - ll).exp(), (lj[1] - ll).exp()], ll)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub model: Gmm2,
    pub labels: Vec<u8>,
    /// Mean log-likelihood after each EM iteration (first entry: initial).
    pub log_likelihood: Vec<f64>,
}

/// Diagonal two-component EM started from a k-means solution.
pub fn gmm2(points: &[Vec<f64>], init: &Kmeans2) -> GmmFit {
    let n = points.len() as f64;
    let dim = points[0].len();
    let stats = |resp: &[[f64; 2]]| {
        let mut model = Gmm2 { weights: [0.0; 2], means: [vec![0.0; dim], vec![0.0; dim]], vars: [vec![0.0; dim], vec![0.0; dim]] };
        for j in 0..2 {
            let nj: f64 = resp.iter().map(|r| r[j]).sum();
            model.weights[j] = nj / n;
            if nj <= 0.0 {
                model.vars[j] = vec![1.0; dim];
                continue;
            }
            for (r, p) in resp.iter().zip(points) {
                crate::params::axpy(r[j] / nj, p, &mut model.means[j]);
            }
            for (r, p) in resp.iter().zip(points) {
                for d in 0..dim {
                    let e = p[d] - model.means[j][d];
                    model.vars[j][d] += r[j] * e * e / nj;
                }
            }
            model.vars[j].iter_mut().for_each(|v| *v = v.max(VAR_FLOOR));
        }
        model
    };
    let hard: Vec<[f64; 2]> = init.labels.iter().map(|&l| if l == 0 { [1.0, 0.0] } else { [0.0, 1.0] }).collect();
    let mut model = stats(&hard);
    let mean_ll = |m: &Gmm2| points.iter().map(|p| m.responsibilities(p).1).sum::<f64>() / n;
    let mut history = vec![mean_ll(&model)];
    for _ in 0..GMM_MAX_ITER {
        let resp: Vec<[f64; 2]> = points.iter().map(|p| model.responsibilities(p).0).collect();
        model = stats(&resp);
        let ll = mean_ll(&model);
        let prev = *history.last().unwrap();
        history.push(ll);
        if (ll - prev).abs() < GMM_TOL {
            break;
        }
    }
    let labels = points
        .iter()
        .map(|p| {
            let r = model.responsibilities(p).0;
            (r[1] > r[0]) as u8
        })
        .collect();
    GmmFit { model, labels, log_likelihood: history }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeModel {
    /// Fewer than two distinct points reached this node; routes everything left.
    Degenerate,
    Kmeans { centroids: [Vec<f64>; 2] },
    Gmm(Gmm2),
}

impl NodeModel {
    /// Probability of routing left.
    pub fn p_left(&self, x: &[f64]) -> f64 {
        match self {
            NodeModel::Degenerate => 1.0,
            NodeModel::Kmeans { centroids } => {
                let d0 = sq_dist(x, &centroids[0]).sqrt();
                let d1 = sq_dist(x, &centroids[1]).sqrt();
                crate::params::sigmoid(d1 - d0)
            }
            NodeModel::Gmm(g) => g.responsibilities(x).0[0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTree {
    pub depth: usize,
    pub kind: ClusterKind,
    /// Split-node models indexed by `t - 1`.
    pub nodes: Vec<NodeModel>,
    /// Context ids per leaf, indexed by `leaf - 2^depth`.
    pub leaves: Vec<Vec<usize>>,
}

fn fit_node(
    t: usize,
    points: &[Vec<f64>],
    ids: Vec<usize>,
    topo: Topology,
    kind: ClusterKind,
    seed: u64,
    nodes: &mut [Option<NodeModel>],
    leaves: &mut [Vec<usize>],
) {
    if topo.is_leaf(t) {
        leaves[t - topo.leaves().start] = ids;
        return;
    }
    let subset: Vec<Vec<f64>> = ids.iter().map(|&i| points[i].clone()).collect();
    let (model, labels) = match kmeans2(&subset, derive_seed(seed, t as u64)) {
        None => (NodeModel::Degenerate, vec![0u8; ids.len()]),
        Some(km) => match kind {
            ClusterKind::Kmeans => (NodeModel::Kmeans { centroids: km.centroids.clone() }, km.labels),
            ClusterKind::Gmm => {
                let fit = gmm2(&subset, &km);
                (NodeModel::Gmm(fit.model), fit.labels)
            }
        },
    };
    nodes[t - 1] = Some(model);
    let (mut left, mut right) = (Vec::new(), Vec::new());
    for (id, l) in ids.into_iter().zip(labels) {
        if l == 0 { left.push(id) } else { right.push(id) }
    }
    fit_node(2 * t, points, left, topo, kind, seed, nodes, leaves);
    fit_node(2 * t + 1, points, right, topo, kind, seed, nodes, leaves);
}

/// Top-down 2-way clustering of L2-normalized context vectors.
pub fn fit_cluster_tree(contexts: &EmbeddingStore, depth: usize, kind: ClusterKind, seed: u64) -> Result<ClusterTree> {
    if contexts.len() < 2 {
        return Err(Error::TooFewContexts(contexts.len()));
    }
    let topo = Topology::new(depth)?;
    let points: Vec<Vec<f64>> = (0..contexts.len()).map(|i| normalized(contexts.vector(i))).collect();
    let mut nodes = vec![None; topo.split_count()];
    let mut leaves = vec![Vec::new(); topo.leaf_count()];
    fit_node(1, &points, (0..contexts.len()).collect(), topo, kind, seed, &mut nodes, &mut leaves);
    let nodes = nodes.into_iter().map(|n| n.unwrap_or(NodeModel::Degenerate)).collect();
    Ok(ClusterTree { depth, kind, nodes, leaves })
}

impl ClusterTree {
    pub fn topology(&self) -> Topology {
        Topology::new(self.depth).expect("depth validated at fit time")
    }

    /// Leaf probabilities: product of per-node 2-way probabilities.
    pub fn leaf_distribution(&self, vector: &[f32]) -> Vec<f64> {
        let x = normalized(vector);
        let zl: Vec<f64> = self.nodes.iter().map(|n| n.p_left(&x)).collect();
        let probs = crate::propagation::propagate_product(&zl, self.topology());
        level_slice(&probs, self.depth).to_vec()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let tree: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        let topo = Topology::new(tree.depth)?;
        if tree.nodes.len() != topo.split_count() || tree.leaves.len() != topo.leaf_count() {
            return Err(Error::Config("cluster tree shape does not match its depth".into()));
        }
        Ok(tree)
    }
}

/// Global search: evaluate every node, pick the best leaf, rerank its
/// contexts by cosine against the raw query.
pub fn tree_search(tree: &ClusterTree, contexts: &EmbeddingStore, query: &[f32], k: usize) -> Vec<Hit> {
    let dist = tree.leaf_distribution(query);
    let best = crate::tree::argmax(dist.iter().copied());
    let q = normalized(query);
    let mut hits: Vec<Hit> = tree.leaves[best]
        .iter()
        .map(|&id| Hit { id: id as u64, score: dot(&q, &normalized(contexts.vector(id))) })
        .collect();
    hits.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal).then(a.id.cmp(&b.id)));
    hits.truncate(k);
    hits
}

/// Hier-GMM leaf probabilities as a level-`D` assignment.
pub fn gmm_leaf_distribution(tree: &ClusterTree, vector: &[f32]) -> Result<Assignment> {
    if tree.kind != ClusterKind::Gmm {
        return Err(Error::WrongKind("gmm"));
    }
    Assignment::from_f64(tree.depth, &tree.leaf_distribution(vector))
}

/// Scores `2^D` leaves with the configured split family, softmax-normalized.
/// The tree-structured aggregator has no tree to follow here and falls back
/// to per-node maps.
#[derive(Debug, Clone)]
pub struct NoTreeModel {
    config: ModelConfig,
    topology: Topology,
    split: SplitFunction,
    n_params: usize,
}

impl NoTreeModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let topology = Topology::new(config.depth)?;
        let split_config = match config.split.clone() {
            SplitConfig::CrossAttention { n_e, d_node, heads, d_head, aggregator: AggregatorKind::TreeStructured, tree_hidden } => {
                SplitConfig::CrossAttention { n_e, d_node, heads, d_head, aggregator: AggregatorKind::PerNodeLinearThenMean, tree_hidden }
            }
            other => other,
        };
        let in_dim = if split_config.uses_tokens() { config.token_dim } else { config.dim };
        let mut layout = Layout::new();
        let split = SplitFunction::new(split_config, topology.leaf_count(), in_dim, None, &mut layout)?;
        Ok(Self { config, topology, split, n_params: layout.len() })
    }

    fn input<'s>(&self, store: &'s EmbeddingStore, id: usize) -> Result<Input<'s>> {
        if self.split.config().uses_tokens() {
            let (data, rows) = store.tokens(id).ok_or_else(|| Error::InvalidStore("cross-attention needs token matrices".into()))?;
            Ok(Input::Tokens { data, rows })
        } else {
            Ok(Input::Sentence(store.vector(id)))
        }
    }

    /// Leaf distribution for one input; dropout active iff `rng` is given.
    pub fn flat_forward(
        &self,
        params: &[f64],
        prep: &crate::split::Prepared,
        input: Input,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Vec<f64>, crate::split::SplitCache, Option<Vec<f64>>)> {
        let (scores, cache) = self.split.forward(params, prep, input, rng.as_deref_mut())?;
        let (mut leaves, mask) = score_dropout(&scores, self.config.score_dropout, rng);
        if let Some(bad) = leaves.iter().find(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("head score {bad}")));
        }
        softmax_in_place(&mut leaves);
        Ok((leaves, cache, mask))
    }

    /// Inference-mode leaf distributions for every record.
    pub fn encode(&self, params: &[f64], store: &EmbeddingStore) -> Result<Vec<Vec<f64>>> {
        let prep = self.split.prepare(params);
        (0..store.len())
            .into_par_iter()
            .map(|i| Ok(self.flat_forward(params, &prep, self.input(store, i)?, None)?.0))
            .collect()
    }
}

impl Trainable for NoTreeModel {
    fn n_params(&self) -> usize {
        self.n_params
    }

    fn depth(&self) -> usize {
        self.topology.depth()
    }

    fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut p = vec![0.0; self.n_params];
        self.split.init(&mut p, &mut ChaCha8Rng::seed_from_u64(seed));
        p
    }

    /// Always the leaf-level loss: there are no coarser levels to schedule.
    fn loss_and_grad(&self, params: &[f64], batch: &BatchData, loss: &LossConfig, seed: u64) -> Result<(f64, Vec<f64>)> {
        let b = batch.pairs.len();
        let prep = self.split.prepare(params);
        let fwd: Vec<_> = (0..2 * b)
            .into_par_iter()
            .map(|r| {
                let (store, id) = if r < b { (batch.queries, batch.pairs[r].0) } else { (batch.contexts, batch.pairs[r - b].1) };
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, r as u64));
                self.flat_forward(params, &prep, self.input(store, id)?, Some(&mut rng))
            })
            .collect::<Result<_>>()?;
        let nodes: Vec<Vec<f64>> = fwd.iter().map(|(l, _, _)| sum_up(l, self.topology)).collect();
        let leaf_loss = LossConfig { level_mode: LevelMode::Single(self.topology.depth()), l1_weight: loss.l1_weight };
        let g = level_losses(&nodes[..b], &nodes[b..], self.topology.depth(), &leaf_loss)?;
        let leaves = self.topology.leaves();
        let dnodes: Vec<&Vec<f64>> = g.dq.iter().chain(&g.dc).collect();
        let records: Vec<usize> = (0..2 * b).collect();
        let parts: Vec<(Vec<f64>, PreparedGrad)> = records
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut grad = vec![0.0; self.n_params];
                let mut pgrad = PreparedGrad::default();
                for &r in chunk {
                    let (probs, cache, mask) = &fwd[r];
                    let mut ds = vec![0.0; probs.len()];
                    softmax_backward(probs, &dnodes[r][leaves.clone()], &mut ds);
                    if let Some(m) = mask {
                        ds.iter_mut().zip(m).for_each(|(d, m)| *d *= m);
                    }
                    self.split.backward(params, &prep, cache, &ds, &mut grad, &mut pgrad);
                }
                (grad, pgrad)
            })
            .collect();
        let mut pgrad = PreparedGrad::default();
        let mut grads = Vec::with_capacity(parts.len());
        for (gr, pg) in parts {
            pgrad.add(&pg);
            grads.push(gr);
        }
        let mut grad = reduce_chunks(self.n_params, grads);
        self.split.finish_backward(params, &pgrad, &mut grad);
        Ok((g.loss, grad))
    }
}

/// A square linear map trained with cosine InfoNCE, optionally summed over
/// nested prefixes of width `2^1 .. 2^D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CosineAdapter {
    pub dim: usize,
    /// Prefix levels for the nested loss; 0 trains the full width only.
    #[serde(default)]
    pub nested_depth: usize,
}

impl CosineAdapter {
    /// Prefix widths the loss is summed over.
    pub fn prefixes(&self) -> Vec<usize> {
        if self.nested_depth == 0 {
            return vec![self.dim];
        }
        (1..=self.nested_depth).map(|h| 1usize << h).filter(|&m| m <= self.dim).collect()
    }

    /// `A x`, unnormalized (the loss and the index normalize).
    pub fn flat_forward(&self, params: &[f64], x: &[f32]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimMismatch { expected: self.dim, got: x.len() });
        }
        let d = self.dim;
        Ok((0..d).map(|i| params[i * d..(i + 1) * d].iter().zip(x).map(|(a, &b)| a * b as f64).sum()).collect())
    }

    /// Adapted vectors truncated to `width` for every record.
    pub fn encode(&self, params: &[f64], store: &EmbeddingStore, width: usize) -> Result<Vec<Vec<f32>>> {
        (0..store.len())
            .into_par_iter()
            .map(|i| Ok(self.flat_forward(params, store.vector(i))?[..width.min(self.dim)].iter().map(|&v| v as f32).collect()))
            .collect()
    }

    /// Nested-prefix loss and gradient w.r.t. the adapted vectors.
    pub fn prefix_loss(&self, q: &[Vec<f64>], c: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let b = q.len();
        let mut loss = 0.0;
        let mut dq = vec![vec![0.0; self.dim]; b];
        let mut dc = vec![vec![0.0; self.dim]; b];
        for m in self.prefixes() {
            let qs: Vec<&[f64]> = q.iter().map(|v| &v[..m]).collect();
            let cs: Vec<&[f64]> = c.iter().map(|v| &v[..m]).collect();
            let g = info_nce_cosine(&qs, &cs)?;
            loss += g.loss;
            for i in 0..b {
                crate::params::axpy(1.0, &g.dq[i], &mut dq[i][..m]);
                crate::params::axpy(1.0, &g.dc[i], &mut dc[i][..m]);
            }
        }
        Ok((loss, dq, dc))
    }
}

impl Trainable for CosineAdapter {
    fn n_params(&self) -> usize {
        self.dim * self.dim
    }

    fn depth(&self) -> usize {
        self.nested_depth.max(1)
    }

    /// Identity map.
    fn init_params(&self, _seed: u64) -> Vec<f64> {
        let mut p = vec![0.0; self.dim * self.dim];
        for i in 0..self.dim {
            p[i * self.dim + i] = 1.0;
        }
        p
    }

    fn loss_and_grad(&self, params: &[f64], batch: &BatchData, _loss: &LossConfig, _seed: u64) -> Result<(f64, Vec<f64>)> {
        let q: Vec<Vec<f64>> = batch.pairs.iter().map(|p| self.flat_forward(params, batch.queries.vector(p.0))).collect::<Result<_>>()?;
        let c: Vec<Vec<f64>> = batch.pairs.iter().map(|p| self.flat_forward(params, batch.contexts.vector(p.1))).collect::<Result<_>>()?;
        let (loss, dq, dc) = self.prefix_loss(&q, &c)?;
        let d = self.dim;
        let mut grad = vec![0.0; d * d];
        let inputs = batch.pairs.iter().map(|p| batch.queries.vector(p.0)).zip(&dq).chain(batch.pairs.iter().map(|p| batch.contexts.vector(p.1)).zip(&dc));
        for (x, dy) in inputs {
            for i in 0..d {
                if dy[i] != 0.0 {
                    let row = &mut grad[i * d..(i + 1) * d];
                    for (g, &xj) in row.iter_mut().zip(x) {
                        *g += dy[i] * xj as f64;
                    }
                }
            }
        }
        Ok((loss, grad))
    }
}
