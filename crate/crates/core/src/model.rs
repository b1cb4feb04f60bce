//! The routing tree: split function + score dropout + propagation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::EmbeddingStore;
use crate::objective::{level_losses, LossConfig};
use crate::params::{axpy, sigmoid, Layout};
use crate::propagation::{level_slice, Propagation, PropagationCache, PropagationConfig};
use crate::split::{score_dropout, Input, Prepared, PreparedGrad, SplitCache, SplitConfig, SplitFunction};
use crate::tree::Topology;

/// Records per gradient chunk. Chunks are reduced in index order, so the
/// summed gradient does not depend on the thread count.
pub const GRAD_CHUNK: usize = 4;

/// SplitMix64 finalizer over `a ^ f(b)`; used to derive independent streams.
pub fn derive_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A batch of positive pairs `(query_id, context_id)`.
#[derive(Debug, Clone, Copy)]
pub struct BatchData<'a> {
    pub queries: &'a EmbeddingStore,
    pub contexts: &'a EmbeddingStore,
    pub pairs: &'a [(usize, usize)],
}

impl<'a> BatchData<'a> {
    /// Records in loss order: all queries, then all contexts.
    fn record(&self, r: usize) -> (&'a EmbeddingStore, usize) {
        let b = self.pairs.len();
        if r < b {
            (self.queries, self.pairs[r].0)
        } else {
            (self.contexts, self.pairs[r - b].1)
        }
    }
}

/// Anything the trainer can optimize.
pub trait Trainable: Sync {
    fn n_params(&self) -> usize;
    /// Deepest level the loss can address.
    fn depth(&self) -> usize;
    fn init_params(&self, seed: u64) -> Vec<f64>;
    /// Mean batch loss and its gradient. `seed` drives every dropout mask.
    fn loss_and_grad(&self, params: &[f64], batch: &BatchData, loss: &LossConfig, seed: u64) -> Result<(f64, Vec<f64>)>;
}

/// Sums per-chunk gradients in chunk order.
pub(crate) fn reduce_chunks(n_params: usize, chunks: Vec<Vec<f64>>) -> Vec<f64> {
    let mut total = vec![0.0; n_params];
    for g in &chunks {
        axpy(1.0, g, &mut total);
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    /// Sentence-vector width.
    pub dim: usize,
    /// Token-vector width (cross-attention only; 0 otherwise).
    #[serde(default)]
    pub token_dim: usize,
    pub split: SplitConfig,
    pub propagation: PropagationConfig,
    #[serde(default)]
    pub score_dropout: f64,
}

#[derive(Debug, Clone)]
pub struct TreeModel {
    config: ModelConfig,
    topology: Topology,
    split: SplitFunction,
    propagation: Propagation,
    n_params: usize,
}

/// Per-record intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct RecordCache {
    split: SplitCache,
    mask: Option<Vec<f64>>,
    zl: Vec<f64>,
    propagation: PropagationCache,
}

impl TreeModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let topology = Topology::new(config.depth)?;
        if !(0.0..1.0).contains(&config.score_dropout) {
            return Err(Error::Config(format!("score dropout {} not in [0, 1)", config.score_dropout)));
        }
        let in_dim = if config.split.uses_tokens() { config.token_dim } else { config.dim };
        let mut layout = Layout::new();
        let split = SplitFunction::new(config.split.clone(), topology.split_count(), in_dim, Some(topology), &mut layout)?;
        let propagation = Propagation::new(&config.propagation, topology, &mut layout)?;
        Ok(Self { config, topology, split, propagation, n_params: layout.len() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn split(&self) -> &SplitFunction {
        &self.split
    }

    pub fn prepare(&self, params: &[f64]) -> Prepared {
        self.split.prepare(params)
    }

    /// What the split function reads for record `id` of `store`.
    pub fn input<'s>(&self, store: &'s EmbeddingStore, id: usize) -> Result<Input<'s>> {
        if id >= store.len() {
            return Err(Error::InvalidStore(format!("record {id} of {}", store.len())));
        }
        if self.config.split.uses_tokens() {
            let (data, rows) = store
                .tokens(id)
                .ok_or_else(|| Error::InvalidStore("cross-attention needs token matrices".into()))?;
            Ok(Input::Tokens { data, rows })
        } else {
            Ok(Input::Sentence(store.vector(id)))
        }
    }

    /// Node probabilities (heap-indexed) for one record. Dropout is active iff
    /// `rng` is given.
    pub fn forward(
        &self,
        params: &[f64],
        prep: &Prepared,
        input: Input,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Vec<f64>, RecordCache)> {
        let (scores, split) = self.split.forward(params, prep, input, rng.as_deref_mut())?;
        let (scores, mask) = score_dropout(&scores, self.config.score_dropout, rng.as_deref_mut());
        let mut zl = Vec::with_capacity(scores.len());
        for &s in &scores {
            if !s.is_finite() {
                return Err(Error::NonFinite(format!("split score {s}")));
            }
            zl.push(sigmoid(s));
        }
        let (probs, propagation) = self.propagation.forward(params, &zl, rng);
        Ok((probs, RecordCache { split, mask, zl, propagation }))
    }

    /// Accumulates parameter gradients for `dprobs` into `grad`.
    pub fn backward(
        &self,
        params: &[f64],
        prep: &Prepared,
        cache: &RecordCache,
        dprobs: &[f64],
        grad: &mut [f64],
        pgrad: &mut PreparedGrad,
    ) {
        let dzl = self.propagation.backward(params, &cache.propagation, dprobs, grad);
        let mut ds: Vec<f64> = dzl.iter().zip(&cache.zl).map(|(d, z)| d * z * (1.0 - z)).collect();
        if let Some(m) = &cache.mask {
            ds.iter_mut().zip(m).for_each(|(d, m)| *d *= m);
        }
        self.split.backward(params, prep, &cache.split, &ds, grad, pgrad);
    }

    /// Inference-mode node probabilities for every record of `store`.
    pub fn encode(&self, params: &[f64], store: &EmbeddingStore) -> Result<Vec<Vec<f64>>> {
        let prep = self.prepare(params);
        (0..store.len())
            .into_par_iter()
            .map(|id| Ok(self.forward(params, &prep, self.input(store, id)?, None)?.0))
            .collect()
    }

    /// Inference-mode level-`h` assignments for every record of `store`.
    pub fn encode_level(&self, params: &[f64], store: &EmbeddingStore, h: usize) -> Result<Vec<Vec<f64>>> {
        if h == 0 || h > self.depth() {
            return Err(Error::LevelOutOfRange(h, self.depth()));
        }
        Ok(self.encode(params, store)?.into_iter().map(|v| level_slice(&v, h).to_vec()).collect())
    }

    /// Learned node embeddings (cross-attention only), indexed by `t - 1`.
    pub fn node_embeddings(&self, params: &[f64]) -> Option<Vec<Vec<f64>>> {
        self.split.node_embeddings(params)
    }
}

impl Trainable for TreeModel {
    fn n_params(&self) -> usize {
        self.n_params
    }

    fn depth(&self) -> usize {
        self.topology.depth()
    }

    fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut p = vec![0.0; self.n_params];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.split.init(&mut p, &mut rng);
        self.propagation.init(&mut p, &mut rng);
        p
    }

    fn loss_and_grad(&self, params: &[f64], batch: &BatchData, loss: &LossConfig, seed: u64) -> Result<(f64, Vec<f64>)> {
        if params.len() != self.n_params {
            return Err(Error::ShapeMismatch(format!("{} params, model has {}", params.len(), self.n_params)));
        }
        let b = batch.pairs.len();
        let prep = self.prepare(params);
        let forward: Vec<(Vec<f64>, RecordCache)> = (0..2 * b)
            .into_par_iter()
            .map(|r| {
                let (store, id) = batch.record(r);
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, r as u64));
                self.forward(params, &prep, self.input(store, id)?, Some(&mut rng))
            })
            .collect::<Result<_>>()?;
        let (probs, caches): (Vec<_>, Vec<_>) = forward.into_iter().unzip();
        let g = level_losses(&probs[..b], &probs[b..], self.depth(), loss)?;
        let dprobs: Vec<&Vec<f64>> = g.dq.iter().chain(&g.dc).collect();
        let records: Vec<usize> = (0..2 * b).collect();
        let parts: Vec<(Vec<f64>, PreparedGrad)> = records
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut grad = vec![0.0; self.n_params];
                let mut pgrad = PreparedGrad::default();
                for &r in chunk {
                    self.backward(params, &prep, &caches[r], dprobs[r], &mut grad, &mut pgrad);
                }
                (grad, pgrad)
            })
            .collect();
        let mut pgrad = PreparedGrad::default();
        let mut grads = Vec::with_capacity(parts.len());
        for (g, pg) in parts {
            pgrad.add(&pg);
            grads.push(g);
        }
        let mut grad = reduce_chunks(self.n_params, grads);
        self.split.finish_backward(params, &pgrad, &mut grad);
        Ok((g.loss, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::LevelMode;
    use crate::split::AggregatorKind;
    use rand::Rng;

    fn stores(n: usize, dim: usize, seed: u64) -> (EmbeddingStore, EmbeddingStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mk = || {
            let sent: Vec<f32> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let toks: Vec<Vec<f32>> =
                (0..n).map(|i| (0..(2 + i % 3) * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            EmbeddingStore::with_tokens(dim, sent, dim, Some(toks)).unwrap()
        };
        (mk(), mk())
    }

    fn config(split: SplitConfig, propagation: PropagationConfig) -> ModelConfig {
        ModelConfig { depth: 3, dim: 6, token_dim: 6, split, propagation, score_dropout: 0.1 }
    }

    #[test]
    fn inference_outputs_are_distributions_per_level() {
        let (q, _) = stores(5, 6, 1);
        for prop in [PropagationConfig::Product {}, PropagationConfig::Learned { hidden: 4, dropout: 0.0 }] {
            let m = TreeModel::new(config(SplitConfig::Linear {}, prop)).unwrap();
            let p = m.init_params(3);
            for v in m.encode(&p, &q).unwrap() {
                for h in 1..=3 {
                    let s: f64 = level_slice(&v, h).iter().sum();
                    assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn gradient_is_independent_of_thread_count() {
        let (q, c) = stores(6, 6, 2);
        let split = SplitConfig::CrossAttention {
            n_e: 2,
            d_node: 4,
            heads: 2,
            d_head: 3,
            aggregator: AggregatorKind::TreeStructured,
            tree_hidden: 3,
        };
        let m = TreeModel::new(config(split, PropagationConfig::Learned { hidden: 8, dropout: 0.2 })).unwrap();
        let p = m.init_params(0);
        let pairs: Vec<(usize, usize)> = (0..6).map(|i| (i, i)).collect();
        let batch = BatchData { queries: &q, contexts: &c, pairs: &pairs };
        let loss = LossConfig { level_mode: LevelMode::SumAllLevels(None), l1_weight: 0.0 };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| m.loss_and_grad(&p, &batch, &loss, 11).unwrap())
        };
        let (l1, g1) = run(1);
        let (l4, g4) = run(4);
        assert_eq!(l1.to_bits(), l4.to_bits());
        assert!(g1.iter().zip(&g4).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(g1.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn derive_seed_separates_streams() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(0, 1), derive_seed(1, 0));
        assert_eq!(derive_seed(5, 9), derive_seed(5, 9));
    }
}
