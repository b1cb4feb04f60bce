//! Embedding stores, text manifests, pair datasets and batching.
//!
//! Binary store layout (all little-endian):
//!
//! ```text
//! "RTRV" | u8 version=1 | u8 dtype=0 | u8 flags | u8 reserved=0
//! u64 count | u32 dim | u32 token_dim
//! count * dim f32 sentence vectors, row-major
//! if flags & 1: per record u32 n_tokens, then n_tokens * token_dim f32
//! ```
//!
//! Flag bit 1 marks a level-index file (see [`crate::index`]), which carries
//! an extra header block and is rejected by [`read_store`].

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"RTRV";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 24;
pub(crate) const FLAG_TOKENS: u8 = 1;
pub(crate) const FLAG_INDEX: u8 = 1 << 1;

/// Ragged per-record token matrices stored back to back.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrices {
    /// Row offsets; record `i` spans rows `offsets[i]..offsets[i + 1]`.
    offsets: Vec<usize>,
    data: Vec<f32>,
}

/// Id-addressed sentence vectors, optionally with token matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    token_dim: usize,
    sentence: Vec<f32>,
    tokens: Option<TokenMatrices>,
}

impl EmbeddingStore {
    pub fn new(dim: usize, sentence: Vec<f32>) -> Result<Self> {
        Self::with_tokens(dim, sentence, 0, None)
    }

    /// `tokens[i]` is a row-major `n_i x token_dim` matrix for record `i`.
    pub fn with_tokens(
        dim: usize,
        sentence: Vec<f32>,
        token_dim: usize,
        tokens: Option<Vec<Vec<f32>>>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidStore("dim must be positive".into()));
        }
        if sentence.len() % dim != 0 {
            return Err(Error::InvalidStore(format!(
                "{} floats is not a multiple of dim {dim}",
                sentence.len()
            )));
        }
        if let Some(bad) = sentence.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidStore(format!("non-finite sentence value {bad}")));
        }
        let count = sentence.len() / dim;
        let tokens = match (token_dim, tokens) {
            (0, None) => None,
            (0, Some(_)) => {
                return Err(Error::InvalidStore("token matrices given with token_dim 0".into()))
            }
            (_, None) => {
                return Err(Error::InvalidStore("token_dim > 0 but no token matrices".into()))
            }
            (td, Some(mats)) => {
                if mats.len() != count {
                    return Err(Error::InvalidStore(format!(
                        "{} token matrices for {count} records",
                        mats.len()
                    )));
                }
                let mut offsets = Vec::with_capacity(count + 1);
                offsets.push(0);
                let mut data = Vec::new();
                for (i, m) in mats.into_iter().enumerate() {
                    if m.is_empty() || m.len() % td != 0 {
                        return Err(Error::InvalidStore(format!(
                            "record {i}: token matrix of {} floats for token_dim {td}",
                            m.len()
                        )));
                    }
                    if m.iter().any(|v| !v.is_finite()) {
                        return Err(Error::InvalidStore(format!("record {i}: non-finite token")));
                    }
                    offsets.push(offsets[i] + m.len() / td);
                    data.extend_from_slice(&m);
                }
                Some(TokenMatrices { offsets, data })
            }
        };
        Ok(Self { dim, token_dim, sentence, tokens })
    }

    pub fn len(&self) -> usize {
        self.sentence.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.sentence.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn has_tokens(&self) -> bool {
        self.tokens.is_some()
    }

    pub fn vector(&self, id: usize) -> &[f32] {
        &self.sentence[id * self.dim..(id + 1) * self.dim]
    }

    pub fn vectors(&self) -> &[f32] {
        &self.sentence
    }

    /// Token matrix of record `id` and its row count.
    pub fn tokens(&self, id: usize) -> Option<(&[f32], usize)> {
        self.tokens.as_ref().map(|t| {
            let (a, b) = (t.offsets[id], t.offsets[id + 1]);
            (&t.data[a * self.token_dim..b * self.token_dim], b - a)
        })
    }

    /// Copies the given records into a new store, in order.
    pub fn subset(&self, ids: &[usize]) -> Result<Self> {
        let mut sentence = Vec::with_capacity(ids.len() * self.dim);
        for &i in ids {
            sentence.extend_from_slice(self.vector(i));
        }
        let tokens = self
            .tokens
            .as_ref()
            .map(|_| ids.iter().map(|&i| self.tokens(i).unwrap().0.to_vec()).collect());
        Self::with_tokens(self.dim, sentence, self.token_dim, tokens)
    }
}

pub(crate) struct Header {
    pub flags: u8,
    pub count: u64,
    pub dim: u32,
    pub token_dim: u32,
}

pub(crate) fn write_header(w: &mut impl Write, h: &Header) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&[VERSION, 0, h.flags, 0])?;
    w.write_all(&h.count.to_le_bytes())?;
    w.write_all(&h.dim.to_le_bytes())?;
    w.write_all(&h.token_dim.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_header(r: &mut impl Read) -> Result<Header> {
    let mut buf = [0u8; HEADER_LEN];
    read_exact(r, &mut buf, "header")?;
    let magic = [buf[0], buf[1], buf[2], buf[3]];
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if buf[4] != VERSION {
        return Err(Error::UnsupportedVersion(buf[4]));
    }
    if buf[5] != 0 {
        return Err(Error::InvalidStore(format!("unsupported dtype {}", buf[5])));
    }
    Ok(Header {
        flags: buf[6],
        count: u64::from_le_bytes(buf[8..16].try_into().unwrap()),
        dim: u32::from_le_bytes(buf[16..20].try_into().unwrap()),
        token_dim: u32::from_le_bytes(buf[20..24].try_into().unwrap()),
    })
}

pub(crate) fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::TruncatedPayload(format!("while reading {what}")),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_f32s(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<f32>> {
    let bytes = n
        .checked_mul(4)
        .ok_or_else(|| Error::DimensionOverflow(format!("{n} floats")))?;
    let mut buf = vec![0u8; bytes];
    read_exact(r, &mut buf, what)?;
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

pub(crate) fn write_f32s(w: &mut impl Write, v: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(v.len() * 4);
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::DimensionOverflow(format!("{what} = {v}")))
}

pub fn write_store_to(store: &EmbeddingStore, w: &mut impl Write) -> Result<()> {
    let header = Header {
        flags: if store.has_tokens() { FLAG_TOKENS } else { 0 },
        count: store.len() as u64,
        dim: to_u32(store.dim, "dim")?,
        token_dim: to_u32(store.token_dim, "token_dim")?,
    };
    write_header(w, &header)?;
    write_f32s(w, &store.sentence)?;
    if store.tokens.is_some() {
        for i in 0..store.len() {
            let (m, n) = store.tokens(i).unwrap();
            w.write_all(&to_u32(n, "n_tokens")?.to_le_bytes())?;
            write_f32s(w, m)?;
        }
    }
    Ok(())
}

pub fn write_store(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_store_to(store, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_store_from(r: &mut impl Read) -> Result<EmbeddingStore> {
    let h = read_header(r)?;
    if h.flags & FLAG_INDEX != 0 {
        return Err(Error::InvalidStore("file is a level index, not an embedding store".into()));
    }
    if h.flags & !FLAG_TOKENS != 0 {
        return Err(Error::InvalidStore(format!("unknown flags {:#04x}", h.flags)));
    }
    let has_tokens = h.flags & FLAG_TOKENS != 0;
    if has_tokens != (h.token_dim > 0) {
        return Err(Error::InvalidStore("token flag disagrees with token_dim".into()));
    }
    let count = usize::try_from(h.count)
        .map_err(|_| Error::DimensionOverflow(format!("count = {}", h.count)))?;
    let (dim, token_dim) = (h.dim as usize, h.token_dim as usize);
    let total = count
        .checked_mul(dim)
        .ok_or_else(|| Error::DimensionOverflow(format!("{count} x {dim}")))?;
    let sentence = read_f32s(r, total, "sentence vectors")?;
    let tokens = if has_tokens {
        let mut mats = Vec::with_capacity(count);
        for i in 0..count {
            let mut nb = [0u8; 4];
            read_exact(r, &mut nb, "token count")?;
            let n = u32::from_le_bytes(nb) as usize;
            let n_floats = n
                .checked_mul(token_dim)
                .ok_or_else(|| Error::DimensionOverflow(format!("record {i} tokens")))?;
            mats.push(read_f32s(r, n_floats, "token matrix")?);
        }
        Some(mats)
    } else {
        None
    };
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::InvalidStore("trailing bytes after payload".into()));
    }
    EmbeddingStore::with_tokens(dim, sentence, token_dim, tokens)
}

pub fn read_store(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let mut r = BufReader::new(File::open(path)?);
    read_store_from(&mut r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Context,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRow {
    pub id: usize,
    pub external_id: String,
    pub role: Role,
    pub text: String,
}

/// One row per internal id, in id order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn text(&self, id: usize) -> &str {
        &self.rows[id].text
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_jsonl(path, &self.rows)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let rows: Vec<ManifestRow> = read_jsonl(path)?;
        for (i, row) in rows.iter().enumerate() {
            if row.id != i {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected id {i}, found {}", row.id),
                });
            }
        }
        Ok(Self { rows })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pair {
    pub query_id: usize,
    pub context_id: usize,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairDataset {
    pub pairs: Vec<Pair>,
}

impl PairDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Pair> {
        self.pairs.iter().filter(move |p| p.split == split)
    }

    /// Checks that every id resolves in its store.
    pub fn validate(&self, queries: &EmbeddingStore, contexts: &EmbeddingStore) -> Result<()> {
        for (i, p) in self.pairs.iter().enumerate() {
            if p.query_id >= queries.len() || p.context_id >= contexts.len() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("pair ({}, {}) does not resolve", p.query_id, p.context_id),
                });
            }
        }
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_jsonl(path, &self.pairs)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self { pairs: read_jsonl(path)? })
    }
}

fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, row).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?,
        );
    }
    Ok(out)
}

/// A batch of `(query_id, context_id)` pairs.
pub type Batch = Vec<(usize, usize)>;

/// One epoch of shuffled batches over `split`; the short tail is dropped.
pub fn make_batches(
    pairs: &PairDataset,
    split: Split,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(Error::BatchSize(batch_size));
    }
    let mut items: Vec<(usize, usize)> =
        pairs.split(split).map(|p| (p.query_id, p.context_id)).collect();
    if items.is_empty() {
        return Err(Error::EmptySplit(split.as_str().into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items.shuffle(&mut rng);
    Ok(items.chunks_exact(batch_size).map(|c| c.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn store_with_tokens() -> EmbeddingStore {
        EmbeddingStore::with_tokens(
            2,
            vec![1.0, 2.0, 3.0, -4.5],
            3,
            Some(vec![vec![0.5; 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, f32::MIN_POSITIVE]]),
        )
        .unwrap()
    }

    fn bytes(store: &EmbeddingStore) -> Vec<u8> {
        let mut buf = Vec::new();
        write_store_to(store, &mut buf).unwrap();
        buf
    }

    #[test]
    fn empty_store_is_header_only() {
        let store = EmbeddingStore::new(4, vec![]).unwrap();
        let buf = bytes(&store);
        assert_eq!(buf.len(), 24);
        assert_eq!(&buf[..4], b"RTRV");
        assert_eq!(buf[4], 1);
        assert_eq!(u32::from_le_bytes(buf[16..20].try_into().unwrap()), 4);
    }

    #[test]
    fn payload_size_matches_layout() {
        let store = EmbeddingStore::new(3, (0..6).map(|i| i as f32).collect()).unwrap();
        assert_eq!(bytes(&store).len(), 24 + 2 * 3 * 4);
        let tok = store_with_tokens();
        // 2 sentence rows of 2, then (4 + 3*4) and (4 + 6*4)
        assert_eq!(bytes(&tok).len(), 24 + 16 + 16 + 28);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let store = store_with_tokens();
        let back = read_store_from(&mut bytes(&store).as_slice()).unwrap();
        assert_eq!(back, store);
        let (m, n) = back.tokens(1).unwrap();
        assert_eq!(n, 2);
        assert_eq!(m[5].to_bits(), f32::MIN_POSITIVE.to_bits());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        let store = store_with_tokens();
        write_store(&store, &path).unwrap();
        assert_eq!(read_store(&path).unwrap(), store);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut buf = bytes(&store_with_tokens());
        buf[0] = b'X';
        assert!(matches!(read_store_from(&mut buf.as_slice()), Err(Error::BadMagic(_))));
        let mut buf = bytes(&store_with_tokens());
        buf[4] = 9;
        assert!(matches!(read_store_from(&mut buf.as_slice()), Err(Error::UnsupportedVersion(9))));
    }

    #[test]
    fn truncated_record_is_detected() {
        let store = EmbeddingStore::new(3, (0..15).map(|i| i as f32).collect()).unwrap();
        let buf = bytes(&store);
        // drop the fifth record
        let cut = &buf[..buf.len() - 12];
        assert!(matches!(read_store_from(&mut &cut[..]), Err(Error::TruncatedPayload(_))));
    }

    #[test]
    fn invariants_enforced() {
        assert!(EmbeddingStore::new(2, vec![1.0, f32::NAN]).is_err());
        assert!(EmbeddingStore::with_tokens(1, vec![1.0], 2, Some(vec![vec![]])).is_err());
        assert!(EmbeddingStore::with_tokens(1, vec![1.0], 2, None).is_err());
    }

    fn pairs(n: usize) -> PairDataset {
        PairDataset {
            pairs: (0..n)
                .map(|i| Pair { query_id: i, context_id: i, split: Split::Train })
                .chain(std::iter::once(Pair { query_id: 0, context_id: 0, split: Split::Val }))
                .collect(),
        }
    }

    #[test]
    fn batching_drops_tail_and_is_deterministic() {
        let ds = pairs(130);
        let a = make_batches(&ds, Split::Train, 64, 7).unwrap();
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|b| b.len() == 64));
        let seen: HashSet<_> = a.iter().flatten().collect();
        assert_eq!(seen.len(), 128);
        assert_eq!(a, make_batches(&ds, Split::Train, 64, 7).unwrap());
        assert_ne!(a, make_batches(&ds, Split::Train, 64, 8).unwrap());
        assert!(matches!(make_batches(&ds, Split::Train, 1, 0), Err(Error::BatchSize(1))));
        assert!(matches!(make_batches(&ds, Split::Test, 2, 0), Err(Error::EmptySplit(_))));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = pairs(3);
        ds.write(dir.path().join("p.jsonl")).unwrap();
        assert_eq!(PairDataset::read(dir.path().join("p.jsonl")).unwrap(), ds);
        let m = Manifest {
            rows: vec![ManifestRow {
                id: 0,
                external_id: "q0".into(),
                role: Role::Query,
                text: "who wrote it".into(),
            }],
        };
        m.write(dir.path().join("m.jsonl")).unwrap();
        assert_eq!(Manifest::read(dir.path().join("m.jsonl")).unwrap(), m);
        std::fs::write(dir.path().join("bad.jsonl"), "{\"id\":0,\"bogus\":1}\n").unwrap();
        assert!(Manifest::read(dir.path().join("bad.jsonl")).is_err());
    }
}
