//! Per-node routing scorers.
//!
//! Three families map an input to one real score per output node:
//!
//! * `Linear`: one hyperplane per node, `s_t = <theta_t, x>`.
//! * `Perceptron`: a shared two-layer ReLU network `x -> R^{n_out}` with
//!   dropout on the hidden layer.
//! * `CrossAttention`: learned node embeddings attend (as queries) over the
//!   token matrix of the input; the attended embeddings are reduced to a score
//!   by one of three aggregators.
//!
//! Each family has a hand-written backward pass. Cross-attention queries do not
//! depend on the input, so they are computed once per parameter state in
//! [`Prepared`] and their gradient is folded back in [`SplitFunction::finish_backward`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{axpy, dot, init_fan_in, softmax_backward, softmax_in_place, Block, Layout};
use crate::tree::Topology;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    MeanThenLinear,
    PerNodeLinearThenMean,
    TreeStructured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitConfig {
    Linear {},
    Perceptron {
        hidden: usize,
        #[serde(default)]
        dropout: f64,
    },
    CrossAttention {
        /// Embeddings per node.
        n_e: usize,
        /// Node-embedding width.
        d_node: usize,
        heads: usize,
        d_head: usize,
        aggregator: AggregatorKind,
        /// Hidden width of the per-node refinement perceptron (tree aggregator).
        #[serde(default = "default_tree_hidden")]
        tree_hidden: usize,
    },
}

fn default_tree_hidden() -> usize {
    8
}

impl SplitConfig {
    /// Cross-attention defaults: 8 heads of width 64, one embedding per node,
    /// node width equal to the attention width, tree-structured aggregation.
    pub fn cross_attention_default() -> Self {
        SplitConfig::CrossAttention {
            n_e: 1,
            d_node: 512,
            heads: 8,
            d_head: 64,
            aggregator: AggregatorKind::TreeStructured,
            tree_hidden: default_tree_hidden(),
        }
    }

    pub fn uses_tokens(&self) -> bool {
        matches!(self, SplitConfig::CrossAttention { .. })
    }

    pub fn name(&self) -> String {
        match self {
            SplitConfig::Linear {} => "linear".into(),
            SplitConfig::Perceptron { .. } => "perceptron".into(),
            SplitConfig::CrossAttention { aggregator, .. } => {
                format!("cross_attention/{}", aggregator_name(*aggregator))
            }
        }
    }
}

pub fn aggregator_name(a: AggregatorKind) -> &'static str {
    match a {
        AggregatorKind::MeanThenLinear => "mean_then_linear",
        AggregatorKind::PerNodeLinearThenMean => "per_node_linear_then_mean",
        AggregatorKind::TreeStructured => "tree_structured",
    }
}

/// What a split function reads from a record.
#[derive(Debug, Clone, Copy)]
pub enum Input<'a> {
    Sentence(&'a [f32]),
    Tokens { data: &'a [f32], rows: usize },
}

#[derive(Debug, Clone)]
struct NodeMlp {
    a: Block,
    c: Block,
    v: Block,
    d: Block,
    /// Ancestor output indices, root first; the node itself is appended.
    inputs: Vec<usize>,
}

#[derive(Debug, Clone)]
enum AggBlocks {
    MeanThenLinear { w: Block, b: Block },
    PerNode { w: Block, b: Block },
    Tree { w: Block, b: Block, mlps: Vec<NodeMlp>, hidden: usize },
}

#[derive(Debug, Clone)]
enum Blocks {
    Linear {
        theta: Block,
    },
    Perceptron {
        w1: Block,
        b1: Block,
        w2: Block,
        b2: Block,
        hidden: usize,
        dropout: f64,
    },
    Cross {
        emb: Block,
        wq: Block,
        wk: Block,
        wv: Block,
        n_e: usize,
        d_node: usize,
        heads: usize,
        d_head: usize,
        agg: AggBlocks,
    },
}

#[derive(Debug, Clone)]
pub struct SplitFunction {
    config: SplitConfig,
    n_out: usize,
    in_dim: usize,
    blocks: Blocks,
}

/// Input-independent intermediates for one parameter state.
#[derive(Debug, Clone, Default)]
pub struct Prepared {
    q: Vec<f64>,
}

/// Gradient w.r.t. [`Prepared`], accumulated across a batch.
#[derive(Debug, Clone, Default)]
pub struct PreparedGrad {
    dq: Vec<f64>,
}

impl PreparedGrad {
    pub fn add(&mut self, other: &PreparedGrad) {
        if self.dq.is_empty() {
            self.dq = other.dq.clone();
        } else if !other.dq.is_empty() {
            axpy(1.0, &other.dq, &mut self.dq);
        }
    }
}

#[derive(Debug, Clone)]
pub enum SplitCache {
    Linear {
        x: Vec<f64>,
    },
    Perceptron {
        x: Vec<f64>,
        pre: Vec<f64>,
        hidden: Vec<f64>,
        mask: Option<Vec<f64>>,
    },
    Cross {
        x: Vec<f64>,
        n_d: usize,
        k: Vec<f64>,
        v: Vec<f64>,
        alpha: Vec<f64>,
        y: Vec<f64>,
        agg: AggCache,
    },
}

#[derive(Debug, Clone)]
pub enum AggCache {
    Plain,
    Tree { raw: Vec<f64>, pre: Vec<Vec<f64>> },
}

fn check_dropout(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("dropout rate must be in [0, 1), got {p}")))
    }
}

fn nonzero(v: usize, what: &str) -> Result<()> {
    if v == 0 {
        Err(Error::Config(format!("{what} must be positive")))
    } else {
        Ok(())
    }
}

impl SplitFunction {
    /// Allocates parameters for `n_out` scored nodes over inputs of width
    /// `in_dim` (sentence width, or token width for cross-attention).
    ///
    /// The tree-structured aggregator needs `topology`, with `n_out` equal to
    /// its split-node count; output `k` is heap node `k + 1`.
    pub fn new(
        config: SplitConfig,
        n_out: usize,
        in_dim: usize,
        topology: Option<Topology>,
        layout: &mut Layout,
    ) -> Result<Self> {
        nonzero(n_out, "node count")?;
        nonzero(in_dim, "input width")?;
        let blocks = match &config {
            SplitConfig::Linear {} => Blocks::Linear { theta: layout.alloc(n_out * in_dim) },
            &SplitConfig::Perceptron { hidden, dropout } => {
                nonzero(hidden, "perceptron hidden width")?;
                check_dropout(dropout)?;
                Blocks::Perceptron {
                    w1: layout.alloc(hidden * in_dim),
                    b1: layout.alloc(hidden),
                    w2: layout.alloc(n_out * hidden),
                    b2: layout.alloc(n_out),
                    hidden,
                    dropout,
                }
            }
            &SplitConfig::CrossAttention { n_e, d_node, heads, d_head, aggregator, tree_hidden } => {
                nonzero(n_e, "n_e")?;
                nonzero(d_node, "d_node")?;
                nonzero(heads, "heads")?;
                nonzero(d_head, "d_head")?;
                let dk = heads * d_head;
                let emb = layout.alloc(n_out * n_e * d_node);
                let wq = layout.alloc(dk * d_node);
                let wk = layout.alloc(dk * in_dim);
                let wv = layout.alloc(dk * in_dim);
                let agg = match aggregator {
                    AggregatorKind::MeanThenLinear => {
                        AggBlocks::MeanThenLinear { w: layout.alloc(dk), b: layout.alloc(1) }
                    }
                    AggregatorKind::PerNodeLinearThenMean => AggBlocks::PerNode {
                        w: layout.alloc(n_out * dk),
                        b: layout.alloc(n_out),
                    },
                    AggregatorKind::TreeStructured => {
                        nonzero(tree_hidden, "tree_hidden")?;
                        let topo = topology.ok_or_else(|| {
                            Error::Config("tree-structured aggregation needs a tree".into())
                        })?;
                        if topo.split_count() != n_out {
                            return Err(Error::Config(format!(
                                "tree aggregator over {n_out} outputs but {} split nodes",
                                topo.split_count()
                            )));
                        }
                        let w = layout.alloc(n_out * dk);
                        let b = layout.alloc(n_out);
                        let mlps = topo
                            .split_nodes()
                            .map(|t| {
                                let mut inputs: Vec<usize> =
                                    topo.ancestors(t).unwrap().into_iter().map(|a| a - 1).collect();
                                inputs.push(t - 1);
                                let fan = inputs.len();
                                NodeMlp {
                                    a: layout.alloc(tree_hidden * fan),
                                    c: layout.alloc(tree_hidden),
                                    v: layout.alloc(tree_hidden),
                                    d: layout.alloc(1),
                                    inputs,
                                }
                            })
                            .collect();
                        AggBlocks::Tree { w, b, mlps, hidden: tree_hidden }
                    }
                };
                Blocks::Cross { emb, wq, wk, wv, n_e, d_node, heads, d_head, agg }
            }
        };
        Ok(Self { config, n_out, in_dim, blocks })
    }

    pub fn config(&self) -> &SplitConfig {
        &self.config
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    /// Fan-in uniform weights, zero biases.
    pub fn init(&self, p: &mut [f64], rng: &mut impl Rng) {
        match &self.blocks {
            Blocks::Linear { theta } => init_fan_in(p, *theta, self.in_dim, rng),
            Blocks::Perceptron { w1, w2, hidden, .. } => {
                init_fan_in(p, *w1, self.in_dim, rng);
                init_fan_in(p, *w2, *hidden, rng);
            }
            Blocks::Cross { emb, wq, wk, wv, d_node, heads, d_head, agg, .. } => {
                let dk = heads * d_head;
                init_fan_in(p, *emb, *d_node, rng);
                init_fan_in(p, *wq, *d_node, rng);
                init_fan_in(p, *wk, self.in_dim, rng);
                init_fan_in(p, *wv, self.in_dim, rng);
                match agg {
                    AggBlocks::MeanThenLinear { w, .. } | AggBlocks::PerNode { w, .. } => {
                        init_fan_in(p, *w, dk, rng)
                    }
                    AggBlocks::Tree { w, mlps, hidden, .. } => {
                        init_fan_in(p, *w, dk, rng);
                        for m in mlps {
                            init_fan_in(p, m.a, m.inputs.len(), rng);
                            init_fan_in(p, m.v, *hidden, rng);
                        }
                    }
                }
            }
        }
    }

    pub fn prepare(&self, p: &[f64]) -> Prepared {
        match &self.blocks {
            Blocks::Cross { emb, wq, n_e, d_node, heads, d_head, .. } => {
                let dk = heads * d_head;
                let (e, wq) = (emb.of(p), wq.of(p));
                let rows = self.n_out * n_e;
                let mut q = vec![0.0; rows * dk];
                for row in 0..rows {
                    let er = &e[row * d_node..(row + 1) * d_node];
                    for c in 0..dk {
                        q[row * dk + c] = dot(&wq[c * d_node..(c + 1) * d_node], er);
                    }
                }
                Prepared { q }
            }
            _ => Prepared::default(),
        }
    }

    fn read_input(&self, input: Input) -> Result<(Vec<f64>, usize)> {
        match (&self.blocks, input) {
            (Blocks::Cross { .. }, Input::Tokens { data, rows }) => {
                if rows == 0 || data.len() != rows * self.in_dim {
                    return Err(Error::DimMismatch { expected: rows * self.in_dim, got: data.len() });
                }
                Ok((data.iter().map(|&v| v as f64).collect(), rows))
            }
            (Blocks::Cross { .. }, Input::Sentence(_)) => {
                Err(Error::ShapeMismatch("cross-attention needs token matrices".into()))
            }
            (_, Input::Sentence(x)) => {
                if x.len() != self.in_dim {
                    return Err(Error::DimMismatch { expected: self.in_dim, got: x.len() });
                }
                Ok((x.iter().map(|&v| v as f64).collect(), 1))
            }
            (_, Input::Tokens { .. }) => {
                Err(Error::ShapeMismatch("this split function reads sentence vectors".into()))
            }
        }
    }

    /// Scores every output node. Dropout is active iff `rng` is given.
    pub fn forward<R: Rng>(
        &self,
        p: &[f64],
        prep: &Prepared,
        input: Input,
        rng: Option<&mut R>,
    ) -> Result<(Vec<f64>, SplitCache)> {
        let (x, n_d) = self.read_input(input)?;
        let d = self.in_dim;
        match &self.blocks {
            Blocks::Linear { theta } => {
                let th = theta.of(p);
                let scores = (0..self.n_out).map(|k| dot(&th[k * d..(k + 1) * d], &x)).collect();
                Ok((scores, SplitCache::Linear { x }))
            }
            Blocks::Perceptron { w1, b1, w2, b2, hidden, dropout } => {
                let (w1, b1, w2, b2) = (w1.of(p), b1.of(p), w2.of(p), b2.of(p));
                let pre: Vec<f64> =
                    (0..*hidden).map(|j| dot(&w1[j * d..(j + 1) * d], &x) + b1[j]).collect();
                let mut h: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
                let mask = match rng {
                    Some(rng) if *dropout > 0.0 => {
                        let m = dropout_mask(*hidden, *dropout, rng);
                        h.iter_mut().zip(&m).for_each(|(v, m)| *v *= m);
                        Some(m)
                    }
                    _ => None,
                };
                let scores = (0..self.n_out)
                    .map(|k| dot(&w2[k * hidden..(k + 1) * hidden], &h) + b2[k])
                    .collect();
                Ok((scores, SplitCache::Perceptron { x, pre, hidden: h, mask }))
            }
            Blocks::Cross { wk, wv, n_e, heads, d_head, agg, .. } => {
                let dk = heads * d_head;
                let (wk, wv) = (wk.of(p), wv.of(p));
                let mut k = vec![0.0; n_d * dk];
                let mut v = vec![0.0; n_d * dk];
                for i in 0..n_d {
                    let xi = &x[i * d..(i + 1) * d];
                    for c in 0..dk {
                        k[i * dk + c] = dot(&wk[c * d..(c + 1) * d], xi);
                        v[i * dk + c] = dot(&wv[c * d..(c + 1) * d], xi);
                    }
                }
                let (alpha, y) = attend(&prep.q, &k, &v, n_d, *heads, *d_head);
                let (scores, agg_cache) = aggregate(agg, p, &y, self.n_out, *n_e, dk);
                Ok((scores, SplitCache::Cross { x, n_d, k, v, alpha, y, agg: agg_cache }))
            }
        }
    }

    /// Accumulates parameter gradients for `dscores` into `grad` (and, for
    /// cross-attention, the query gradient into `pgrad`).
    pub fn backward(
        &self,
        p: &[f64],
        prep: &Prepared,
        cache: &SplitCache,
        dscores: &[f64],
        grad: &mut [f64],
        pgrad: &mut PreparedGrad,
    ) {
        let d = self.in_dim;
        match (&self.blocks, cache) {
            (Blocks::Linear { theta }, SplitCache::Linear { x }) => {
                let g = theta.of_mut(grad);
                for (k, &ds) in dscores.iter().enumerate() {
                    axpy(ds, x, &mut g[k * d..(k + 1) * d]);
                }
            }
            (
                Blocks::Perceptron { w1, b1, w2, b2, hidden, .. },
                SplitCache::Perceptron { x, pre, hidden: h, mask },
            ) => {
                let hd = *hidden;
                let w2v = w2.of(p);
                let mut dh = vec![0.0; hd];
                {
                    let gw2 = w2.of_mut(grad);
                    for (k, &ds) in dscores.iter().enumerate() {
                        axpy(ds, h, &mut gw2[k * hd..(k + 1) * hd]);
                        axpy(ds, &w2v[k * hd..(k + 1) * hd], &mut dh);
                    }
                }
                axpy(1.0, dscores, b2.of_mut(grad));
                if let Some(m) = mask {
                    dh.iter_mut().zip(m).for_each(|(v, m)| *v *= m);
                }
                for j in 0..hd {
                    if pre[j] <= 0.0 {
                        dh[j] = 0.0;
                    }
                }
                let gw1 = w1.of_mut(grad);
                for j in 0..hd {
                    axpy(dh[j], x, &mut gw1[j * d..(j + 1) * d]);
                }
                axpy(1.0, &dh, b1.of_mut(grad));
            }
            (
                Blocks::Cross { wk, wv, n_e, heads, d_head, agg, .. },
                SplitCache::Cross { x, n_d, k, v, alpha, y, agg: agg_cache },
            ) => {
                let dk = heads * d_head;
                let n_d = *n_d;
                let dy = aggregate_backward(agg, p, y, agg_cache, dscores, grad, self.n_out, *n_e, dk);
                if pgrad.dq.is_empty() {
                    pgrad.dq = vec![0.0; prep.q.len()];
                }
                let (dkm, dvm) = attend_backward(
                    &prep.q, k, v, alpha, &dy, n_d, *heads, *d_head, &mut pgrad.dq,
                );
                let gwk = wk.of_mut(grad);
                for i in 0..n_d {
                    let xi = &x[i * d..(i + 1) * d];
                    for c in 0..dk {
                        let g = dkm[i * dk + c];
                        if g != 0.0 {
                            axpy(g, xi, &mut gwk[c * d..(c + 1) * d]);
                        }
                    }
                }
                let gwv = wv.of_mut(grad);
                for i in 0..n_d {
                    let xi = &x[i * d..(i + 1) * d];
                    for c in 0..dk {
                        let g = dvm[i * dk + c];
                        if g != 0.0 {
                            axpy(g, xi, &mut gwv[c * d..(c + 1) * d]);
                        }
                    }
                }
            }
            _ => unreachable!("cache does not match split family"),
        }
    }

    /// Pushes the accumulated query gradient into the node embeddings and `W_q`.
    pub fn finish_backward(&self, p: &[f64], pgrad: &PreparedGrad, grad: &mut [f64]) {
        if let Blocks::Cross { emb, wq, n_e, d_node, heads, d_head, .. } = &self.blocks {
            if pgrad.dq.is_empty() {
                return;
            }
            let dk = heads * d_head;
            let (e, wqv) = (emb.of(p), wq.of(p));
            let rows = self.n_out * n_e;
            {
                let gwq = wq.of_mut(grad);
                for row in 0..rows {
                    let er = &e[row * d_node..(row + 1) * d_node];
                    for c in 0..dk {
                        let g = pgrad.dq[row * dk + c];
                        if g != 0.0 {
                            axpy(g, er, &mut gwq[c * d_node..(c + 1) * d_node]);
                        }
                    }
                }
            }
            let ge = emb.of_mut(grad);
            for row in 0..rows {
                let gr = &mut ge[row * d_node..(row + 1) * d_node];
                for c in 0..dk {
                    let g = pgrad.dq[row * dk + c];
                    if g != 0.0 {
                        axpy(g, &wqv[c * d_node..(c + 1) * d_node], gr);
                    }
                }
            }
        }
    }

    /// Node embeddings mean-pooled over `n_e`, one per output node.
    pub fn node_embeddings(&self, p: &[f64]) -> Option<Vec<Vec<f64>>> {
        match &self.blocks {
            Blocks::Cross { emb, n_e, d_node, .. } => {
                let e = emb.of(p);
                Some(
                    (0..self.n_out)
                        .map(|t| {
                            let mut m = vec![0.0; *d_node];
                            for r in 0..*n_e {
                                let row = (t * n_e + r) * d_node;
                                axpy(1.0 / *n_e as f64, &e[row..row + d_node], &mut m);
                            }
                            m
                        })
                        .collect(),
                )
            }
            _ => None,
        }
    }
}

/// Inverted-dropout mask: 0 with probability `rate`, else `1 / (1 - rate)`.
pub fn dropout_mask(n: usize, rate: f64, rng: &mut impl Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect()
}

/// Dropout on node scores. Identity outside training or when `rate == 0`.
pub fn score_dropout(
    scores: &[f64],
    rate: f64,
    rng: Option<&mut impl Rng>,
) -> (Vec<f64>, Option<Vec<f64>>) {
    match rng {
        Some(rng) if rate > 0.0 => {
            let mask = dropout_mask(scores.len(), rate, rng);
            (scores.iter().zip(&mask).map(|(s, m)| s * m).collect(), Some(mask))
        }
        _ => (scores.to_vec(), None),
    }
}

/// Left/right routing probabilities, `(sigmoid(s), 1 - sigmoid(s))`.
pub fn route_probs(scores: &[f64]) -> Result<Vec<(f64, f64)>> {
    scores
        .iter()
        .map(|&s| {
            if !s.is_finite() {
                return Err(Error::NonFinite(format!("split score {s}")));
            }
            let l = crate::params::sigmoid(s);
            Ok((l, 1.0 - l))
        })
        .collect()
}

/// Multi-head attention of the prepared queries over one record's keys.
///
/// Returns per-(row, head) attention weights over the `n_d` keys and the
/// concatenated head outputs, `rows x dk`.
fn attend(q: &[f64], k: &[f64], v: &[f64], n_d: usize, heads: usize, d_head: usize) -> (Vec<f64>, Vec<f64>) {
    let dk = heads * d_head;
    let rows = q.len() / dk;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut alpha = vec![0.0; rows * heads * n_d];
    let mut y = vec![0.0; rows * dk];
    for row in 0..rows {
        for h in 0..heads {
            let cs = h * d_head..(h + 1) * d_head;
            let qh = &q[row * dk..][cs.clone()];
            let a = &mut alpha[(row * heads + h) * n_d..(row * heads + h + 1) * n_d];
            for i in 0..n_d {
                a[i] = dot(qh, &k[i * dk..][cs.clone()]) * scale;
            }
            softmax_in_place(a);
            let yr = &mut y[row * dk..][cs.clone()];
            for i in 0..n_d {
                axpy(a[i], &v[i * dk..][cs.clone()], yr);
            }
        }
    }
    (alpha, y)
}

#[allow(clippy::too_many_arguments)]
fn attend_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    alpha: &[f64],
    dy: &[f64],
    n_d: usize,
    heads: usize,
    d_head: usize,
    dq: &mut [f64],
) -> (Vec<f64>, Vec<f64>) {
    let dk = heads * d_head;
    let rows = q.len() / dk;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut dkm = vec![0.0; n_d * dk];
    let mut dvm = vec![0.0; n_d * dk];
    let mut da = vec![0.0; n_d];
    let mut dl = vec![0.0; n_d];
    for row in 0..rows {
        for h in 0..heads {
            let cs = h * d_head..(h + 1) * d_head;
            let dyr = &dy[row * dk..][cs.clone()];
            if dyr.iter().all(|&g| g == 0.0) {
                continue;
            }
            let a = &alpha[(row * heads + h) * n_d..(row * heads + h + 1) * n_d];
            for i in 0..n_d {
                da[i] = dot(dyr, &v[i * dk..][cs.clone()]);
                axpy(a[i], dyr, &mut dvm[i * dk..][cs.clone()]);
            }
            softmax_backward(a, &da, &mut dl);
            let qh = &q[row * dk..][cs.clone()];
            for i in 0..n_d {
                let g = dl[i] * scale;
                axpy(g, &k[i * dk..][cs.clone()], &mut dq[row * dk..][cs.clone()]);
                axpy(g, qh, &mut dkm[i * dk..][cs.clone()]);
            }
        }
    }
    (dkm, dvm)
}

fn per_node_raw(w: &[f64], b: &[f64], y: &[f64], n_out: usize, n_e: usize, dk: usize) -> Vec<f64> {
    (0..n_out)
        .map(|t| {
            let wt = &w[t * dk..(t + 1) * dk];
            let s: f64 = (0..n_e).map(|r| dot(wt, &y[(t * n_e + r) * dk..][..dk])).sum();
            s / n_e as f64 + b[t]
        })
        .collect()
}

fn aggregate(agg: &AggBlocks, p: &[f64], y: &[f64], n_out: usize, n_e: usize, dk: usize) -> (Vec<f64>, AggCache) {
    match agg {
        AggBlocks::MeanThenLinear { w, b } => {
            let (w, b) = (w.of(p), b.of(p)[0]);
            let scores = (0..n_out)
                .map(|t| {
                    let s: f64 = (0..n_e).map(|r| dot(w, &y[(t * n_e + r) * dk..][..dk])).sum();
                    s / n_e as f64 + b
                })
                .collect();
            (scores, AggCache::Plain)
        }
        AggBlocks::PerNode { w, b } => (per_node_raw(w.of(p), b.of(p), y, n_out, n_e, dk), AggCache::Plain),
        AggBlocks::Tree { w, b, mlps, hidden } => {
            let raw = per_node_raw(w.of(p), b.of(p), y, n_out, n_e, dk);
            let mut pre_all = Vec::with_capacity(n_out);
            let scores = mlps
                .iter()
                .map(|m| {
                    let (a, c, v, d) = (m.a.of(p), m.c.of(p), m.v.of(p), m.d.of(p)[0]);
                    let fan = m.inputs.len();
                    let u: Vec<f64> = m.inputs.iter().map(|&i| raw[i]).collect();
                    let pre: Vec<f64> =
                        (0..*hidden).map(|j| dot(&a[j * fan..(j + 1) * fan], &u) + c[j]).collect();
                    let s = pre.iter().zip(v).map(|(&z, &vj)| z.max(0.0) * vj).sum::<f64>() + d;
                    pre_all.push(pre);
                    s
                })
                .collect();
            (scores, AggCache::Tree { raw, pre: pre_all })
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn aggregate_backward(
    agg: &AggBlocks,
    p: &[f64],
    y: &[f64],
    cache: &AggCache,
    dscores: &[f64],
    grad: &mut [f64],
    n_out: usize,
    n_e: usize,
    dk: usize,
) -> Vec<f64> {
    let mut dy = vec![0.0; y.len()];
    let inv = 1.0 / n_e as f64;
    let per_node_back = |w: &Block, b: &Block, draw: &[f64], grad: &mut [f64], dy: &mut [f64]| {
        let wv = w.of(p);
        {
            let gw = w.of_mut(grad);
            for t in 0..n_out {
                let g = draw[t] * inv;
                if g == 0.0 {
                    continue;
                }
                for r in 0..n_e {
                    let row = (t * n_e + r) * dk;
                    axpy(g, &y[row..row + dk], &mut gw[t * dk..(t + 1) * dk]);
                    axpy(g, &wv[t * dk..(t + 1) * dk], &mut dy[row..row + dk]);
                }
            }
        }
        axpy(1.0, draw, b.of_mut(grad));
    };
    match (agg, cache) {
        (AggBlocks::MeanThenLinear { w, b }, _) => {
            let wv = w.of(p);
            let gw = w.of_mut(grad);
            for t in 0..n_out {
                let g = dscores[t] * inv;
                for r in 0..n_e {
                    let row = (t * n_e + r) * dk;
                    axpy(g, &y[row..row + dk], gw);
                    axpy(g, wv, &mut dy[row..row + dk]);
                }
            }
            b.of_mut(grad)[0] += dscores.iter().sum::<f64>();
        }
        (AggBlocks::PerNode { w, b }, _) => per_node_back(w, b, dscores, grad, &mut dy),
        (AggBlocks::Tree { w, b, mlps, hidden }, AggCache::Tree { raw, pre }) => {
            let mut draw = vec![0.0; n_out];
            for (t, m) in mlps.iter().enumerate() {
                let ds = dscores[t];
                if ds == 0.0 {
                    continue;
                }
                let fan = m.inputs.len();
                let pre_t = &pre[t];
                let (av, vv) = (m.a.of(p), m.v.of(p));
                let dpre: Vec<f64> = (0..*hidden)
                    .map(|j| if pre_t[j] > 0.0 { ds * vv[j] } else { 0.0 })
                    .collect();
                {
                    let gv = m.v.of_mut(grad);
                    for j in 0..*hidden {
                        gv[j] += ds * pre_t[j].max(0.0);
                    }
                }
                m.d.of_mut(grad)[0] += ds;
                axpy(1.0, &dpre, m.c.of_mut(grad));
                let u: Vec<f64> = m.inputs.iter().map(|&i| raw[i]).collect();
                let ga = m.a.of_mut(grad);
                for j in 0..*hidden {
                    if dpre[j] != 0.0 {
                        axpy(dpre[j], &u, &mut ga[j * fan..(j + 1) * fan]);
                        for (q, &i) in m.inputs.iter().enumerate() {
                            draw[i] += dpre[j] * av[j * fan + q];
                        }
                    }
                }
            }
            per_node_back(w, b, &draw, grad, &mut dy);
        }
        _ => unreachable!("aggregator cache mismatch"),
    }
    dy
}
