//! Exact level indexes, top-k search, retrieval metrics and latency.
//!
//! Index files reuse the store layout with flag bit 1 set, followed by an
//! extension block before the rows:
//!
//! ```text
//! header (flags = 2, count, dim = row width, token_dim = 0)
//! u32 level | u32 metric (0 = ntvd, 1 = cosine) | count * u64 context ids
//! count * dim f32 rows
//! ```

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_exact, read_f32s, read_header, to_u32, write_f32s, write_header, Header, FLAG_INDEX};
use crate::io::EmbeddingStore;
use crate::model::TreeModel;
use crate::tree::ASSIGNMENT_TOL;

/// Rows scanned per parallel task.
const SCAN_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Ntvd,
    Cosine,
}

impl Metric {
    fn code(self) -> u32 {
        match self {
            Metric::Ntvd => 0,
            Metric::Cosine => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Ntvd => "ntvd",
            Metric::Cosine => "cosine",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: u64,
    pub score: f64,
}

/// Higher score first, then lower id.
fn better(a: &Hit, b: &Hit) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then(a.id.cmp(&b.id))
}

/// Heap entry ordered so the worst retained hit sits on top.
#[derive(Debug, Clone, Copy)]
struct Worst(Hit);

impl PartialEq for Worst {
    fn eq(&self, other: &Self) -> bool {
        better(&self.0, &other.0) == Ordering::Equal
    }
}
impl Eq for Worst {}
impl PartialOrd for Worst {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Worst {
    fn cmp(&self, other: &Self) -> Ordering {
        better(&self.0, &other.0)
    }
}

fn top_k(hits: impl Iterator<Item = Hit>, k: usize) -> Vec<Hit> {
    let mut heap = BinaryHeap::with_capacity(k + 1);
    for h in hits {
        if heap.len() < k {
            heap.push(Worst(h));
        } else if let Some(top) = heap.peek() {
            if better(&h, &top.0) == Ordering::Less {
                heap.pop();
                heap.push(Worst(h));
            }
        }
    }
    let mut out: Vec<Hit> = heap.into_iter().map(|w| w.0).collect();
    out.sort_by(better);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelIndex {
    level: usize,
    metric: Metric,
    width: usize,
    ids: Vec<u64>,
    /// Row-major; cosine rows are stored unit-normalized.
    rows: Vec<f32>,
}

fn normalize(v: &mut [f32]) {
    let n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
    }
}

impl LevelIndex {
    /// Builds from explicit rows. `level` is informational for cosine indexes.
    pub fn from_rows(level: usize, metric: Metric, width: usize, ids: Vec<u64>, mut rows: Vec<f32>) -> Result<Self> {
        if rows.len() != ids.len() * width {
            return Err(Error::ShapeMismatch(format!("{} values for {} rows of width {width}", rows.len(), ids.len())));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::InvalidStore(format!("duplicate context id {dup}")));
        }
        if let Some(bad) = rows.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("index value {bad}")));
        }
        match metric {
            Metric::Ntvd => {
                if width != 1 << level {
                    return Err(Error::LevelMismatch(level, width));
                }
                for (i, r) in rows.chunks_exact(width.max(1)).enumerate() {
                    let s: f64 = r.iter().map(|&v| v as f64).sum();
                    if r.iter().any(|&v| v < 0.0) || (s - 1.0).abs() > ASSIGNMENT_TOL {
                        return Err(Error::InvalidStore(format!("row {i} is not a distribution")));
                    }
                }
            }
            Metric::Cosine => rows.chunks_exact_mut(width.max(1)).for_each(normalize),
        }
        Ok(Self { level, metric, width, ids, rows })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.width..(i + 1) * self.width]
    }

    fn score(&self, q: &[f64], row: &[f32]) -> f64 {
        match self.metric {
            Metric::Ntvd => -0.5 * q.iter().zip(row).map(|(a, &b)| (a - b as f64).abs()).sum::<f64>(),
            Metric::Cosine => q.iter().zip(row).map(|(a, &b)| a * b as f64).sum(),
        }
    }

    /// Exact top-k by exhaustive scan.
    pub fn search(&self, query: &[f32], metric: Metric, k: usize) -> Result<Vec<Hit>> {
        if metric != self.metric {
            return Err(Error::MetricMismatch { index: self.metric.as_str().into(), query: metric.as_str().into() });
        }
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if query.len() != self.width {
            return Err(match metric {
                Metric::Ntvd => Error::LevelMismatch(self.width, query.len()),
                Metric::Cosine => Error::DimMismatch { expected: self.width, got: query.len() },
            });
        }
        let mut q = query.to_vec();
        if metric == Metric::Cosine {
            normalize(&mut q);
        }
        let q: Vec<f64> = q.iter().map(|&v| v as f64).collect();
        let k = k.min(self.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        let scan = |start: usize, end: usize| {
            top_k((start..end).map(|i| Hit { id: self.ids[i], score: self.score(&q, self.row(i)) }), k)
        };
        if self.len() <= SCAN_CHUNK {
            return Ok(scan(0, self.len()));
        }
        let partial: Vec<Vec<Hit>> = (0..self.len().div_ceil(SCAN_CHUNK))
            .into_par_iter()
            .map(|c| scan(c * SCAN_CHUNK, ((c + 1) * SCAN_CHUNK).min(self.len())))
            .collect();
        Ok(top_k(partial.into_iter().flatten(), k))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = Header { flags: FLAG_INDEX, count: self.len() as u64, dim: to_u32(self.width, "width")?, token_dim: 0 };
        write_header(w, &header)?;
        w.write_all(&to_u32(self.level, "level")?.to_le_bytes())?;
        w.write_all(&self.metric.code().to_le_bytes())?;
        for id in &self.ids {
            w.write_all(&id.to_le_bytes())?;
        }
        write_f32s(w, &self.rows)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let h = read_header(r)?;
        if h.flags != FLAG_INDEX || h.token_dim != 0 {
            return Err(Error::InvalidStore("not a level index file".into()));
        }
        let mut ext = [0u8; 8];
        read_exact(r, &mut ext, "index header")?;
        let level = u32::from_le_bytes(ext[..4].try_into().unwrap()) as usize;
        let metric = match u32::from_le_bytes(ext[4..].try_into().unwrap()) {
            0 => Metric::Ntvd,
            1 => Metric::Cosine,
            m => return Err(Error::InvalidStore(format!("unknown metric code {m}"))),
        };
        let count = usize::try_from(h.count).map_err(|_| Error::DimensionOverflow(format!("count = {}", h.count)))?;
        let width = h.dim as usize;
        let mut ids = Vec::with_capacity(count.min(1 << 20));
        let mut b = [0u8; 8];
        for _ in 0..count {
            read_exact(r, &mut b, "context ids")?;
            ids.push(u64::from_le_bytes(b));
        }
        let total = count.checked_mul(width).ok_or_else(|| Error::DimensionOverflow(format!("{count} x {width}")))?;
        let rows = read_f32s(r, total, "index rows")?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::InvalidStore("trailing bytes after payload".into()));
        }
        Self::from_rows(level, metric, width, ids, rows)
    }
}

/// Routes every context through the model (inference mode) and indexes its
/// level-`h` assignment. Ids are store positions.
pub fn build_index(model: &TreeModel, params: &[f64], store: &EmbeddingStore, level: usize, metric: Metric) -> Result<LevelIndex> {
    let rows = model.encode_level(params, store, level)?;
    let flat: Vec<f32> = rows.iter().flatten().map(|&v| v as f32).collect();
    LevelIndex::from_rows(level, metric, 1 << level, (0..store.len() as u64).collect(), flat)
}

/// Indexes raw vectors under cosine similarity.
pub fn build_cosine_index(vectors: &[Vec<f32>], ids: Vec<u64>, width: usize) -> Result<LevelIndex> {
    for v in vectors {
        if v.len() != width {
            return Err(Error::DimMismatch { expected: width, got: v.len() });
        }
    }
    LevelIndex::from_rows(0, Metric::Cosine, width, ids, vectors.concat())
}

fn gt_rank(ranked: &[Hit], gt: Option<u64>, i: usize, k: usize) -> Result<Option<usize>> {
    let gt = gt.ok_or(Error::MissingGt(i))?;
    Ok(ranked.iter().take(k).position(|h| h.id == gt).map(|r| r + 1))
}

fn check_lengths(results: &[Vec<Hit>], gt: &[Option<u64>]) -> Result<()> {
    if results.len() != gt.len() {
        return Err(Error::MissingGt(results.len().min(gt.len())));
    }
    Ok(())
}

/// Fraction of queries whose ground truth appears in the top `k`.
pub fn recall_at_k(results: &[Vec<Hit>], gt: &[Option<u64>], k: usize) -> Result<f64> {
    check_lengths(results, gt)?;
    let mut hits = 0usize;
    for (i, r) in results.iter().enumerate() {
        hits += gt_rank(r, gt[i], i, k)?.is_some() as usize;
    }
    Ok(if results.is_empty() { 0.0 } else { hits as f64 / results.len() as f64 })
}

/// Mean NDCG@k with a single relevant item per query.
pub fn ndcg_at_k(results: &[Vec<Hit>], gt: &[Option<u64>], k: usize) -> Result<f64> {
    check_lengths(results, gt)?;
    let mut total = 0.0;
    for (i, r) in results.iter().enumerate() {
        if let Some(rank) = gt_rank(r, gt[i], i, k)? {
            total += 1.0 / ((rank + 1) as f64).log2();
        }
    }
    Ok(if results.is_empty() { 0.0 } else { total / results.len() as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub samples: usize,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Per-query search latency in milliseconds. One warmup pass is discarded.
pub fn measure_latency(index: &LevelIndex, queries: &[Vec<f32>], k: usize, repetitions: usize) -> Result<LatencyStats> {
    if repetitions < 3 {
        return Err(Error::Config(format!("latency needs at least 3 repetitions, got {repetitions}")));
    }
    if queries.is_empty() {
        return Ok(LatencyStats::default());
    }
    for q in queries {
        index.search(q, index.metric(), k)?;
    }
    let mut times = Vec::with_capacity(queries.len() * repetitions);
    for _ in 0..repetitions {
        for q in queries {
            let start = Instant::now();
            let r = index.search(q, index.metric(), k)?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(r);
        }
    }
    times.sort_by(|a, b| a.total_cmp(b));
    Ok(LatencyStats {
        mean: times.iter().sum::<f64>() / times.len() as f64,
        p50: percentile(&times, 0.5),
        p95: percentile(&times, 0.95),
        samples: times.len(),
    })
}

/// One line of a results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultRow {
    pub query_id: u64,
    pub ranked: Vec<Hit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub recall: std::collections::BTreeMap<String, f64>,
    pub ndcg: std::collections::BTreeMap<String, f64>,
    pub latency_ms: LatencyStats,
}

impl MetricsReport {
    pub fn compute(results: &[Vec<Hit>], gt: &[Option<u64>], ks: &[usize], latency_ms: LatencyStats) -> Result<Self> {
        let mut recall = std::collections::BTreeMap::new();
        let mut ndcg = std::collections::BTreeMap::new();
        for &k in ks {
            recall.insert(k.to_string(), recall_at_k(results, gt, k)?);
            ndcg.insert(k.to_string(), ndcg_at_k(results, gt, k)?);
        }
        Ok(Self { recall, ndcg, latency_ms })
    }
}
