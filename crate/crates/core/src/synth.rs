//! Seeded Gaussian-cluster corpora with planted keywords.
//!
//! Cluster means lie on a sphere of radius `separation`; each context is its
//! cluster mean plus unit Gaussian noise, and each query is its positive
//! context plus `N(0, sigma_q^2)` noise. Context texts mention their cluster's
//! keyword among filler words drawn from a shared vocabulary.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{EmbeddingStore, Manifest, ManifestRow, Pair, PairDataset, Role, Split};

const KEYWORDS: &[&str] = &[
    "publishing", "television", "astronomy", "volcano", "orchestra", "harvest", "submarine", "cathedral",
    "glacier", "vaccine", "bicycle", "tournament", "parliament", "satellite", "pottery", "railway",
    "desert", "violin", "pharmacy", "lighthouse", "wrestling", "chemistry", "monastery", "tornado",
    "saxophone", "vineyard", "aviation", "archaeology", "ballet", "currency", "mineral", "reptile",
    "telescope", "cinema", "poetry", "fishing", "robotics", "carnival", "opera", "mining",
];

const FILLER: &[&str] = &[
    "report", "people", "history", "region", "system", "early", "known", "large", "local", "group",
    "several", "period", "public", "major", "form", "later", "country", "second", "area", "made",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub clusters: usize,
    pub dim: usize,
    pub per_cluster: usize,
    pub sigma_q: f64,
    pub separation: f64,
    pub seed: u64,
    /// Emit token matrices (`4..=16` rows of sentence vector plus noise).
    #[serde(default)]
    pub tokens: bool,
    #[serde(default = "default_token_noise")]
    pub token_noise: f64,
}

fn default_token_noise() -> f64 {
    0.1
}

impl SynthSpec {
    /// K=32, dim=16, 100 contexts per cluster, s=10, sigma_q=0.1, with tokens.
    pub fn standard(seed: u64) -> Self {
        Self { clusters: 32, dim: 16, per_cluster: 100, sigma_q: 0.1, separation: 10.0, seed, tokens: true, token_noise: 0.1 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::SpecInvalid(m));
        if self.clusters < 2 {
            return bad(format!("need at least 2 clusters, got {}", self.clusters));
        }
        if self.dim == 0 || self.per_cluster == 0 {
            return bad("dim and per_cluster must be positive".into());
        }
        if !(self.sigma_q >= 0.0) || !(self.sigma_q < self.separation) {
            return bad(format!("need 0 <= sigma_q < separation, got {} and {}", self.sigma_q, self.separation));
        }
        if !(self.token_noise >= 0.0) {
            return bad(format!("token noise {} is negative", self.token_noise));
        }
        Ok(())
    }
}

/// Keyword planted in cluster `k`'s texts.
pub fn cluster_keyword(k: usize) -> String {
    match KEYWORDS.get(k) {
        Some(w) => (*w).to_string(),
        None => format!("topic{k}"),
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub contexts: EmbeddingStore,
    pub queries: EmbeddingStore,
    pub pairs: PairDataset,
    pub context_manifest: Manifest,
    pub query_manifest: Manifest,
    /// Cluster of each context (and of the query with the same id).
    pub cluster: Vec<usize>,
    pub means: Vec<Vec<f64>>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn token_matrix(rng: &mut ChaCha8Rng, v: &[f64], noise: f64) -> Vec<f32> {
    let rows = rng.gen_range(4..=16);
    let mut out = Vec::with_capacity(rows * v.len());
    for _ in 0..rows {
        out.extend(v.iter().map(|&x| (x + noise * rng.sample::<f64, _>(StandardNormal)) as f32));
    }
    out
}

fn text(rng: &mut ChaCha8Rng, keyword: &str) -> String {
    let mut words: Vec<&str> = (0..6).map(|_| *FILLER.choose(rng).unwrap()).collect();
    words.insert(rng.gen_range(0..=words.len()), keyword);
    words.insert(rng.gen_range(0..=words.len()), "the");
    words.join(" ")
}

/// Context `i` belongs to cluster `i / per_cluster`; query `i` pairs with it.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dim;
    let means: Vec<Vec<f64>> = (0..spec.clusters)
        .map(|_| {
            let mut v = gaussian(&mut rng, d, 1.0);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter_mut().for_each(|x| *x *= spec.separation / n);
            v
        })
        .collect();
    let n = spec.clusters * spec.per_cluster;
    let mut ctx = Vec::with_capacity(n);
    let mut qry = Vec::with_capacity(n);
    let mut cluster = Vec::with_capacity(n);
    for (k, mean) in means.iter().enumerate() {
        for _ in 0..spec.per_cluster {
            let c: Vec<f64> = mean.iter().zip(gaussian(&mut rng, d, 1.0)).map(|(m, e)| m + e).collect();
            let q: Vec<f64> = c.iter().zip(gaussian(&mut rng, d, spec.sigma_q)).map(|(c, e)| c + e).collect();
            ctx.push(c);
            qry.push(q);
            cluster.push(k);
        }
    }
    let (ctx_tokens, qry_tokens) = if spec.tokens {
        let c = ctx.iter().map(|v| token_matrix(&mut rng, v, spec.token_noise)).collect();
        let q = qry.iter().map(|v| token_matrix(&mut rng, v, spec.token_noise)).collect();
        (Some(c), Some(q))
    } else {
        (None, None)
    };
    let flat = |rows: &[Vec<f64>]| rows.iter().flatten().map(|&x| x as f32).collect::<Vec<f32>>();
    let token_dim = if spec.tokens { d } else { 0 };
    let contexts = EmbeddingStore::with_tokens(d, flat(&ctx), token_dim, ctx_tokens)?;
    let queries = EmbeddingStore::with_tokens(d, flat(&qry), token_dim, qry_tokens)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut split = vec![Split::Train; n];
    let (n_val, n_test) = (n / 10, n / 10);
    for (pos, &i) in order.iter().enumerate() {
        split[i] = if pos < n_val {
            Split::Val
        } else if pos < n_val + n_test {
            Split::Test
        } else {
            Split::Train
        };
    }
    let pairs = PairDataset { pairs: (0..n).map(|i| Pair { query_id: i, context_id: i, split: split[i] }).collect() };

    let mut context_rows = Vec::with_capacity(n);
    let mut query_rows = Vec::with_capacity(n);
    for i in 0..n {
        let kw = cluster_keyword(cluster[i]);
        context_rows.push(ManifestRow { id: i, external_id: format!("c{i}"), role: Role::Context, text: text(&mut rng, &kw) });
        query_rows.push(ManifestRow { id: i, external_id: format!("q{i}"), role: Role::Query, text: format!("what about {kw}") });
    }
    Ok(SynthData {
        contexts,
        queries,
        pairs,
        context_manifest: Manifest { rows: context_rows },
        query_manifest: Manifest { rows: query_rows },
        cluster,
        means,
    })
}
