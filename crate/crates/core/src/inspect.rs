//! Tree inspection: similarity-by-tree-distance analyses, subtree keywords
//! and JSON/dot exports.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::EmbeddingStore;
use crate::model::{Trainable, TreeModel};
use crate::params::dot;
use crate::tree::{argmax, node_depth, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodePairMode {
    AllPairs,
    AncestorDescendant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    /// Tree distance or LCA depth.
    pub key: usize,
    pub pairs: u64,
    pub sum: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityBuckets {
    pub buckets: Vec<Bucket>,
    /// Mean similarity over every pair considered, regardless of bucket.
    pub baseline: f64,
    pub baseline_pairs: u64,
}

impl SimilarityBuckets {
    fn from_sums(sums: BTreeMap<usize, (u64, f64)>, baseline: (u64, f64)) -> Self {
        let buckets = sums
            .into_iter()
            .map(|(key, (pairs, sum))| Bucket { key, pairs, sum, mean: sum / pairs as f64 })
            .collect();
        let mean = if baseline.0 > 0 { baseline.1 / baseline.0 as f64 } else { 0.0 };
        Self { buckets, baseline: mean, baseline_pairs: baseline.0 }
    }

    pub fn keys(&self) -> Vec<f64> {
        self.buckets.iter().map(|b| b.key as f64).collect()
    }

    pub fn means(&self) -> Vec<f64> {
        self.buckets.iter().map(|b| b.mean).collect()
    }

    /// Spearman correlation between bucket key and bucket mean.
    pub fn trend(&self) -> f64 {
        spearman(&self.keys(), &self.means())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CongruenceReport {
    pub all_pairs: SimilarityBuckets,
    pub ancestor_descendant: SimilarityBuckets,
    pub lca: SimilarityBuckets,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let n = (dot(a, a) * dot(b, b)).sqrt();
    if n > 0.0 { dot(a, b) / n } else { 0.0 }
}

/// Node-embedding cosine similarity bucketed by tree distance. All-pairs
/// mode covers every unordered pair of split nodes; ancestor-descendant mode
/// only pairs whose distance is their depth difference.
pub fn node_embedding_similarity(model: &TreeModel, params: &[f64], mode: NodePairMode) -> Result<SimilarityBuckets> {
    let emb = model.node_embeddings(params).ok_or(Error::NoNodeEmbeddings)?;
    Ok(embedding_buckets(&emb, mode))
}

/// `emb[t - 1]` is node `t`'s embedding.
pub fn embedding_buckets(emb: &[Vec<f64>], mode: NodePairMode) -> SimilarityBuckets {
    let n = emb.len();
    let rows: Vec<(BTreeMap<usize, (u64, f64)>, (u64, f64))> = (1..=n)
        .into_par_iter()
        .map(|u| {
            let mut sums = BTreeMap::new();
            let mut base = (0u64, 0.0);
            for v in u + 1..=n {
                let s = cosine(&emb[u - 1], &emb[v - 1]);
                base.0 += 1;
                base.1 += s;
                let l = crate::tree::lca(u, v);
                let d = node_depth(u) + node_depth(v) - 2 * node_depth(l);
                if mode == NodePairMode::AllPairs || l == u {
                    let e = sums.entry(d).or_insert((0, 0.0));
                    e.0 += 1;
                    e.1 += s;
                }
            }
            (sums, base)
        })
        .collect();
    merge(rows)
}

fn merge(rows: Vec<(BTreeMap<usize, (u64, f64)>, (u64, f64))>) -> SimilarityBuckets {
    let mut sums: BTreeMap<usize, (u64, f64)> = BTreeMap::new();
    let mut base = (0u64, 0.0);
    for (row, b) in rows {
        for (k, (c, s)) in row {
            let e = sums.entry(k).or_insert((0, 0.0));
            e.0 += c;
            e.1 += s;
        }
        base.0 += b.0;
        base.1 += b.1;
    }
    SimilarityBuckets::from_sums(sums, base)
}

/// Heap id of each record's argmax leaf.
pub fn argmax_leaves(model: &TreeModel, params: &[f64], store: &EmbeddingStore) -> Result<Vec<usize>> {
    let depth = model.depth();
    let first = 1usize << depth;
    Ok(model.encode_level(params, store, depth)?.iter().map(|v| first + argmax(v.iter().copied())).collect())
}

/// Raw-embedding cosine of sampled context pairs bucketed by the depth of
/// their argmax leaves' lowest common ancestor.
pub fn lca_context_similarity(
    model: &TreeModel,
    params: &[f64],
    store: &EmbeddingStore,
    sample_size: usize,
    seed: u64,
) -> Result<SimilarityBuckets> {
    let leaves = argmax_leaves(model, params, store)?;
    lca_buckets(&leaves, store, sample_size, seed)
}

/// Pairs are drawn uniformly with replacement among distinct-index pairs.
pub fn lca_buckets(leaves: &[usize], store: &EmbeddingStore, sample_size: usize, seed: u64) -> Result<SimilarityBuckets> {
    let n = store.len();
    if n < 2 {
        return Err(Error::TooFewContexts(n));
    }
    let vecs: Vec<Vec<f64>> = (0..n).map(|i| store.vector(i).iter().map(|&x| x as f64).collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<(usize, usize)> = (0..sample_size)
        .map(|_| {
            let i = rng.gen_range(0..n);
            let mut j = rng.gen_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            (i, j)
        })
        .collect();
    let rows = pairs
        .par_chunks(4096)
        .map(|chunk| {
            let mut sums = BTreeMap::new();
            let mut base = (0u64, 0.0);
            for &(i, j) in chunk {
                let s = cosine(&vecs[i], &vecs[j]);
                let e = sums.entry(node_depth(crate::tree::lca(leaves[i], leaves[j]))).or_insert((0, 0.0));
                e.0 += 1;
                e.1 += s;
                base.0 += 1;
                base.1 += s;
            }
            (sums, base)
        })
        .collect();
    Ok(merge(rows))
}

/// All three analyses in one report.
pub fn congruence_report(
    model: &TreeModel,
    params: &[f64],
    store: &EmbeddingStore,
    sample_size: usize,
    seed: u64,
) -> Result<CongruenceReport> {
    Ok(CongruenceReport {
        all_pairs: node_embedding_similarity(model, params, NodePairMode::AllPairs)?,
        ancestor_descendant: node_embedding_similarity(model, params, NodePairMode::AncestorDescendant)?,
        lca: lca_context_similarity(model, params, store, sample_size, seed)?,
    })
}

/// Ranks starting at 1, ties averaged.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson on tie-averaged ranks); 0 when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 { 0.0 } else { sxy / (sxx * syy).sqrt() }
}

/// Two-sided permutation p-value for a Spearman trend:
/// `(1 + #{|rho_perm| >= |rho_obs|}) / (1 + n_perm)`.
pub fn permutation_p_value(x: &[f64], y: &[f64], n_perm: usize, seed: u64) -> f64 {
    let obs = spearman(x, y).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = y.to_vec();
    let mut hits = 0usize;
    for _ in 0..n_perm {
        y.shuffle(&mut rng);
        if spearman(x, &y).abs() >= obs - 1e-12 {
            hits += 1;
        }
    }
    (1 + hits) as f64 / (1 + n_perm) as f64
}

fn stopwords() -> &'static HashSet<&'static str> {
    static WORDS: OnceLock<HashSet<&'static str>> = OnceLock::new();
    WORDS.get_or_init(|| include_str!("stopwords.txt").lines().map(str::trim).filter(|w| !w.is_empty()).collect())
}

/// Lowercased alphanumeric runs, stopwords removed.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .filter(|w| !stopwords().contains(w.as_str()))
}

fn counts<'a>(texts: impl IntoIterator<Item = &'a str>) -> (HashMap<String, u64>, u64) {
    let mut map = HashMap::new();
    let mut total = 0;
    for t in texts {
        for w in tokenize(t) {
            *map.entry(w).or_insert(0) += 1;
            total += 1;
        }
    }
    (map, total)
}

/// Signed log-likelihood ratio (G²) of a term's frequency in a target versus
/// a reference corpus, divided by the combined token count. Negative when the
/// term is relatively rarer in the target.
pub fn keyness(a: u64, target_total: u64, b: u64, reference_total: u64) -> f64 {
    let (a, b, c, d) = (a as f64, b as f64, target_total as f64, reference_total as f64);
    let n = c + d;
    if n == 0.0 || a + b == 0.0 {
        return 0.0;
    }
    let e1 = c * (a + b) / n;
    let e2 = d * (a + b) / n;
    let term = |o: f64, e: f64| if o > 0.0 { o * (o / e).ln() } else { 0.0 };
    let g2 = 2.0 * (term(a, e1) + term(b, e2));
    let sign = if c > 0.0 && d > 0.0 && a / c < b / d { -1.0 } else { 1.0 };
    sign * g2 / n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyword {
    pub term: String,
    pub keyness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeKeywords {
    pub node: usize,
    pub contexts: usize,
    pub keywords: Vec<Keyword>,
}

/// Top-`k` terms of `subtree` by keyness against `background`; ties by term.
pub fn extract_keywords(node: usize, subtree: &[&str], background: &[&str], k: usize) -> Result<Vec<Keyword>> {
    let (target, t_total) = counts(subtree.iter().copied());
    if t_total == 0 {
        return Err(Error::EmptySubtree(node));
    }
    let (reference, r_total) = counts(background.iter().copied());
    let mut out: Vec<Keyword> = target
        .into_iter()
        .map(|(term, a)| {
            let b = reference.get(&term).copied().unwrap_or(0);
            Keyword { keyness: keyness(a, t_total, b, r_total), term }
        })
        .collect();
    out.sort_by(|x, y| y.keyness.total_cmp(&x.keyness).then_with(|| x.term.cmp(&y.term)));
    out.truncate(k);
    Ok(out)
}

/// Number of contexts whose argmax leaf lies under each node; indexed by heap
/// id (slot 0 unused).
pub fn subtree_counts(leaves: &[usize], topology: Topology) -> Vec<usize> {
    let mut out = vec![0; topology.node_count() + 1];
    for &leaf in leaves {
        let mut t = leaf;
        while t >= 1 {
            out[t] += 1;
            t >>= 1;
        }
    }
    out
}

/// Keywords for every node with a non-empty subtree, against the whole corpus.
pub fn node_keywords(leaves: &[usize], texts: &[&str], topology: Topology, k: usize) -> Result<Vec<NodeKeywords>> {
    let counts = subtree_counts(leaves, topology);
    (1..=topology.node_count())
        .into_par_iter()
        .filter(|&t| counts[t] > 0)
        .map(|t| {
            let shift = topology.depth() - node_depth(t);
            let members: Vec<&str> = leaves.iter().zip(texts).filter(|(l, _)| *l >> shift == t).map(|(_, s)| *s).collect();
            Ok(NodeKeywords { node: t, contexts: counts[t], keywords: extract_keywords(t, &members, texts, k)? })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    Json,
    Dot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportNode {
    pub id: usize,
    pub depth: usize,
    pub parent: Option<usize>,
    pub contexts: usize,
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeExport {
    pub depth: usize,
    pub nodes: Vec<ExportNode>,
}

pub fn tree_export(leaves: &[usize], topology: Topology, keywords: &[NodeKeywords]) -> TreeExport {
    let counts = subtree_counts(leaves, topology);
    let by_node: HashMap<usize, &NodeKeywords> = keywords.iter().map(|k| (k.node, k)).collect();
    let nodes = (1..=topology.node_count())
        .map(|t| ExportNode {
            id: t,
            depth: node_depth(t),
            parent: (t > 1).then_some(t / 2),
            contexts: counts[t],
            keywords: by_node.get(&t).map(|k| k.keywords.iter().map(|w| w.term.clone()).collect()).unwrap_or_default(),
        })
        .collect();
    TreeExport { depth: topology.depth(), nodes }
}

pub fn export_tree(leaves: &[usize], topology: Topology, keywords: &[NodeKeywords], format: ExportFormat) -> Result<String> {
    let doc = tree_export(leaves, topology, keywords);
    match format {
        ExportFormat::Json => serde_json::to_string_pretty(&doc).map_err(|e| Error::Config(e.to_string())),
        ExportFormat::Dot => {
            let mut s = String::from("digraph tree {\n  node [shape=box];\n");
            for n in &doc.nodes {
                let kw = n.keywords.join(", ").replace('"', "'");
                let _ = writeln!(s, "  n{} [label=\"{} ({})\\n{}\"];", n.id, n.id, n.contexts, kw);
            }
            for n in &doc.nodes {
                if let Some(p) = n.parent {
                    let _ = writeln!(s, "  n{p} -> n{};", n.id);
                }
            }
            s.push_str("}\n");
            Ok(s)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ranks_and_spearman() {
        assert_eq!(ranks(&[3.0, 1.0, 1.0, 2.0]), vec![4.0, 1.5, 1.5, 3.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 0.0]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0], &[5.0, 5.0]), 0.0);
        // 1 - 6 sum d^2 / (n(n^2-1)) without ties
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [2.0, 1.0, 4.0, 3.0, 5.0];
        assert!((spearman(&x, &y) - (1.0 - 6.0 * 4.0 / 120.0)).abs() < 1e-12);
    }

    #[test]
    fn permutation_test_separates_trend_from_noise() {
        let x: Vec<f64> = (1..=8).map(|v| v as f64).collect();
        let trend: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!(permutation_p_value(&x, &trend, 2000, 1) < 0.01);
        let flat = [0.1, 0.3, 0.2, 0.15, 0.25, 0.05, 0.22, 0.12];
        assert!(permutation_p_value(&x, &flat, 2000, 1) > 0.05);
    }

    #[test]
    fn embedding_buckets_cover_split_node_distances() {
        let emb: Vec<Vec<f64>> = (1..=7).map(|t| vec![1.0, t as f64]).collect();
        let all = embedding_buckets(&emb, NodePairMode::AllPairs);
        assert_eq!(all.keys(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(all.buckets.iter().map(|b| b.pairs).sum::<u64>(), 21);
        assert_eq!(all.baseline_pairs, 21);
        let anc = embedding_buckets(&emb, NodePairMode::AncestorDescendant);
        assert_eq!(anc.keys(), vec![1.0, 2.0]);
        assert_eq!(anc.buckets[0].pairs, 6);
        assert_eq!(anc.buckets[1].pairs, 4);
        for b in &all.buckets {
            assert!((b.mean - b.sum / b.pairs as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn shared_leaf_is_full_depth_and_duplicates_are_one() {
        let s = EmbeddingStore::new(2, vec![1.0, 2.0, 1.0, 2.0]).unwrap();
        let b = lca_buckets(&[5, 5], &s, 50, 0).unwrap();
        assert_eq!(b.keys(), vec![2.0]);
        assert!((b.buckets[0].mean - 1.0).abs() < 1e-12);
        let b = lca_buckets(&[4, 7], &s, 50, 0).unwrap();
        assert_eq!(b.keys(), vec![0.0]);
        assert!((b.baseline - 1.0).abs() < 1e-12);
    }

    #[test]
    fn keyness_properties() {
        // uniform term has zero keyness
        assert!(keyness(10, 100, 20, 200).abs() < 1e-12);
        assert!(keyness(5, 100, 0, 100) > 0.0);
        assert!(keyness(0, 100, 5, 100) < 0.0);
        assert!((keyness(5, 100, 3, 300) - keyness(10, 200, 6, 600)).abs() < 1e-12);
    }

    #[test]
    fn planted_vocabularies_top_each_node() {
        let left = ["the publishing house report", "publishing news today", "a report on publishing"];
        let right = ["tv report tonight", "the tv news", "news about tv"];
        let all: Vec<&str> = left.iter().chain(&right).copied().collect();
        let l = extract_keywords(2, &left, &all, 3).unwrap();
        let r = extract_keywords(3, &right, &all, 3).unwrap();
        assert_eq!(l[0].term, "publishing");
        assert_eq!(r[0].term, "tv");
        assert!(l[0].keyness > 0.0);
        assert!(l.iter().all(|k| k.term != "the" && k.term != "a"));
        assert!(matches!(extract_keywords(4, &[], &all, 3), Err(Error::EmptySubtree(4))));
        assert!(matches!(extract_keywords(4, &["the a of"], &all, 3), Err(Error::EmptySubtree(4))));

        let topo = Topology::new(1).unwrap();
        let kws = node_keywords(&[2, 2, 2, 3, 3, 3], &all, topo, 2).unwrap();
        assert_eq!(kws.len(), 3);
        assert_eq!(kws[1].keywords[0].term, "publishing");
        assert_eq!(kws[2].keywords[0].term, "tv");
    }

    proptest! {
        #[test]
        fn subtree_only_term_beats_uniform_terms(n_sub in 1usize..20, n_rest in 1usize..20, reps in 1usize..4) {
            let sub: Vec<String> = (0..n_sub).map(|i| format!("alpha shared{} zebra", i % 3)).collect();
            let rest: Vec<String> = (0..n_rest).map(|i| format!("shared{} beta", i % 3)).collect();
            let all: Vec<&str> = sub.iter().chain(&rest).map(String::as_str).collect();
            let subs: Vec<&str> = sub.iter().map(String::as_str).collect();
            let kw = extract_keywords(1, &subs, &all, 10).unwrap();
            let top = kw[0].keyness;
            prop_assert!(top > 0.0);
            prop_assert!(kw[0].term == "alpha" || kw[0].term == "zebra");
            // duplicating the whole corpus leaves keyness unchanged
            let subs2: Vec<&str> = subs.iter().cycle().take(subs.len() * reps).copied().collect();
            let all2: Vec<&str> = all.iter().cycle().take(all.len() * reps).copied().collect();
            let kw2 = extract_keywords(1, &subs2, &all2, 10).unwrap();
            prop_assert!((kw2[0].keyness - top).abs() < 1e-9);
        }
    }

    #[test]
    fn exports_are_well_formed() {
        let topo = Topology::new(2).unwrap();
        let leaves = [4, 4, 5, 7, 7, 7];
        let counts = subtree_counts(&leaves, topo);
        assert_eq!(counts[1], 6);
        assert_eq!(counts[4..8].iter().sum::<usize>(), 6);
        let dot = export_tree(&leaves, topo, &[], ExportFormat::Dot).unwrap();
        assert!(dot.starts_with("digraph"));
        assert_eq!(dot.matches("->").count(), 6);
        assert_eq!(dot.matches("[label=").count(), 7);
        let json = export_tree(&leaves, topo, &[], ExportFormat::Json).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["nodes"].as_array().unwrap().len(), 7);
        let back: TreeExport = serde_json::from_value(v).unwrap();
        assert_eq!(back, tree_export(&leaves, topo, &[]));
    }
}
