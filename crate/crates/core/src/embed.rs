//! Dense row-per-item embedding matrices, their on-disk formats, and the
//! built-in signed feature-hashing embedder.
//!
//! Binary layout (`EMB1`): the 4-byte magic, little-endian `u32` dim, `u32` row
//! count, then per row a `u16` id length, the UTF-8 id bytes and `dim` little-endian
//! `f32` values. JSONL layout: one `{"id": ..., "v": [...]}` object per line.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::corpus::{split_chunk_id, ChunkSet};
use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 4] = b"EMB1";
const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f64>,
    pub provider: String,
    normalized: bool,
    /// Rows that are all zero because their source chunk had no tokens.
    pub empty_rows: Vec<usize>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f64>, provider: impl Into<String>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Format("dimension must be positive".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: ids.len() * dim,
                got: data.len(),
            });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        for (row, values) in data.chunks_exact(dim).enumerate() {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    row,
                    id: ids[row].clone(),
                });
            }
        }
        let mut m = Self {
            ids,
            dim,
            data,
            provider: provider.into(),
            normalized: false,
            empty_rows: Vec::new(),
        };
        m.normalized = m.rows_are_unit();
        Ok(m)
    }

    pub fn from_rows(ids: Vec<String>, rows: &[Vec<f64>], provider: impl Into<String>) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::Format(format!(
                    "row {i} has dimension {} but {dim} was expected",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(ids, dim, data, provider)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    fn rows_are_unit(&self) -> bool {
        self.rows()
            .all(|r| (norm(r) - 1.0).abs() <= NORM_TOLERANCE)
    }

    /// L2-normalize every row. Zero rows stay zero and are listed in `empty_rows`.
    pub fn normalize(&mut self) {
        let dim = self.dim;
        let mut zero = Vec::new();
        for (i, row) in self.data.chunks_exact_mut(dim).enumerate() {
            let n = norm(row);
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            } else {
                zero.push(i);
            }
        }
        self.empty_rows = zero;
        self.normalized = self.empty_rows.is_empty();
    }

    pub fn normalized(mut self) -> Self {
        self.normalize();
        self
    }

    /// Rows selected by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let ids = indices.iter().map(|&i| self.ids[i].clone()).collect();
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        let empty_rows = indices
            .iter()
            .enumerate()
            .filter(|(_, i)| self.empty_rows.contains(i))
            .map(|(k, _)| k)
            .collect();
        Self {
            ids,
            dim: self.dim,
            data,
            provider: self.provider.clone(),
            normalized: self.normalized,
            empty_rows,
        }
    }

    pub fn concat(parts: &[EmbeddingMatrix]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("nothing to concatenate".into()))?;
        let mut ids = Vec::new();
        let mut data = Vec::new();
        let mut empty_rows = Vec::new();
        for p in parts {
            if p.dim != first.dim {
                return Err(Error::DimensionMismatch {
                    expected: first.dim,
                    got: p.dim,
                });
            }
            empty_rows.extend(p.empty_rows.iter().map(|r| r + ids.len()));
            ids.extend(p.ids.iter().cloned());
            data.extend_from_slice(&p.data);
        }
        let mut m = Self::new(ids, first.dim, data, first.provider.clone())?;
        m.empty_rows = empty_rows;
        Ok(m)
    }

    pub fn save_binary(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_binary()?).map_err(|e| Error::io(path, e))
    }

    pub fn to_binary(&self) -> Result<Vec<u8>> {
        let dim = u32::try_from(self.dim).map_err(|_| Error::Format("dimension too large".into()))?;
        let rows = u32::try_from(self.len()).map_err(|_| Error::Format("too many rows".into()))?;
        let mut out = Vec::with_capacity(12 + self.len() * (2 + 16 + 4 * self.dim));
        out.extend_from_slice(BINARY_MAGIC);
        out.extend_from_slice(&dim.to_le_bytes());
        out.extend_from_slice(&rows.to_le_bytes());
        for (id, row) in self.ids.iter().zip(self.rows()) {
            let len = u16::try_from(id.len())
                .map_err(|_| Error::Format(format!("id longer than 65535 bytes: {id:.40}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for v in row {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_binary(bytes: &[u8], provider: impl Into<String>) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != BINARY_MAGIC {
            return Err(Error::Format("missing EMB1 magic".into()));
        }
        let dim = cur.u32()? as usize;
        let rows = cur.u32()? as usize;
        if dim == 0 {
            return Err(Error::Format("header dimension is zero".into()));
        }
        let mut ids = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows.saturating_mul(dim).min(1 << 24));
        for row in 0..rows {
            let len = cur.u16()? as usize;
            let id = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::Format(format!("row {row}: id is not UTF-8")))?
                .to_string();
            let raw = cur
                .take(4 * dim)
                .map_err(|_| Error::Format(format!("row {row} ({id}) is shorter than dim {dim}")))?;
            for b in raw.chunks_exact(4) {
                data.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
            }
            ids.push(id);
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after {rows} rows of dim {dim}",
                bytes.len() - cur.pos
            )));
        }
        Self::new(ids, dim, data, provider)
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for (id, row) in self.ids.iter().zip(self.rows()) {
            let line = serde_json::to_string(&JsonRow {
                id: id.clone(),
                v: row.to_vec(),
            })
            .map_err(|e| Error::Format(e.to_string()))?;
            out.extend_from_slice(line.as_bytes());
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn from_jsonl(reader: impl BufRead, provider: impl Into<String>) -> Result<Self> {
        let mut ids = Vec::new();
        let mut data = Vec::new();
        let mut dim = None;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
            if line.trim().is_empty() {
                continue;
            }
            // serde_json refuses NaN/Infinity literals, so non-finite rows fail here.
            let row: JsonRow = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
            let d = *dim.get_or_insert(row.v.len());
            if row.v.len() != d {
                return Err(Error::Format(format!(
                    "line {} ({}) has dimension {} but {d} was expected",
                    lineno + 1,
                    row.id,
                    row.v.len()
                )));
            }
            ids.push(row.id);
            data.extend(row.v);
        }
        Self::new(ids, dim.unwrap_or(0), data, provider)
    }
}

#[derive(Serialize, Deserialize)]
struct JsonRow {
    id: String,
    v: Vec<f64>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("unexpected end of file at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
}

/// Load an externally produced embedding file. Files starting with the `EMB1`
/// magic are read as binary, everything else as JSONL.
pub fn load_external_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("embeddings");
    let provider = format!("external:{stem}");
    if bytes.starts_with(BINARY_MAGIC) {
        EmbeddingMatrix::from_binary(&bytes, provider)
    } else {
        EmbeddingMatrix::from_jsonl(BufReader::new(bytes.as_slice()), provider)
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashedNgramConfig {
    pub dim: usize,
    pub ngram_min: usize,
    pub ngram_max: usize,
    pub seed: u64,
}

impl Default for HashedNgramConfig {
    fn default() -> Self {
        Self {
            dim: 1024,
            ngram_min: 1,
            ngram_max: 2,
            seed: 0,
        }
    }
}

impl HashedNgramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 64 {
            return Err(Error::InvalidConfig(format!("hashed embedding dim {} < 64", self.dim)));
        }
        if !(1 <= self.ngram_min && self.ngram_min <= self.ngram_max && self.ngram_max <= 3) {
            return Err(Error::InvalidConfig(format!(
                "n-gram orders must satisfy 1 <= min <= max <= 3, got {}..{}",
                self.ngram_min, self.ngram_max
            )));
        }
        Ok(())
    }

    /// Bucket and sign of one n-gram. The low bit of the hash is the sign and the
    /// remaining bits pick the bucket.
    pub fn feature(&self, gram: &[String]) -> (usize, f64) {
        let h = hash_gram(gram, self.seed);
        let bucket = ((h >> 1) % self.dim as u64) as usize;
        let sign = if h & 1 == 0 { 1.0 } else { -1.0 };
        (bucket, sign)
    }
}

fn hash_gram(gram: &[String], seed: u64) -> u64 {
    let mut buf = Vec::with_capacity(gram.iter().map(|t| t.len() + 1).sum());
    for (i, tok) in gram.iter().enumerate() {
        if i > 0 {
            buf.push(0x1f);
        }
        buf.extend_from_slice(tok.as_bytes());
    }
    xxh3_64_with_seed(&buf, seed)
}

pub fn hashed_ngram_vector(tokens: &[String], cfg: &HashedNgramConfig) -> Vec<f64> {
    let mut v = vec![0.0; cfg.dim];
    for order in cfg.ngram_min..=cfg.ngram_max {
        for gram in tokens.windows(order) {
            let (bucket, sign) = cfg.feature(gram);
            v[bucket] += sign;
        }
    }
    let n = norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// One L2-normalized row per chunk, ids `<doc_id>#<index>`.
pub fn hashed_ngram_embed(chunks: &ChunkSet, cfg: &HashedNgramConfig) -> Result<EmbeddingMatrix> {
    cfg.validate()?;
    let mut ids = Vec::with_capacity(chunks.len());
    let mut data = Vec::with_capacity(chunks.len() * cfg.dim);
    let mut empty_rows = Vec::new();
    for i in 0..chunks.len() {
        let v = hashed_ngram_vector(chunks.chunk_tokens(i), cfg);
        if v.iter().all(|x| *x == 0.0) {
            empty_rows.push(i);
        }
        ids.push(chunks.chunk_id(i));
        data.extend(v);
    }
    let mut m = EmbeddingMatrix::new(ids, cfg.dim, data, "hashed-ngram")?;
    m.normalized = empty_rows.is_empty();
    m.empty_rows = empty_rows;
    Ok(m)
}

/// Mean of the document's chunk rows, renormalized.
pub fn pool_document(chunk_vectors: &EmbeddingMatrix, doc_id: &str) -> Result<Vec<f64>> {
    let rows: Vec<usize> = chunk_vectors
        .ids()
        .iter()
        .enumerate()
        .filter(|(_, id)| split_chunk_id(id).map(|(d, _)| d) == Some(doc_id))
        .map(|(i, _)| i)
        .collect();
    pool_rows(chunk_vectors, &rows)
        .ok_or_else(|| Error::InvalidInput(format!("no chunk rows for document {doc_id}")))?
}

fn pool_rows(m: &EmbeddingMatrix, rows: &[usize]) -> Option<Result<Vec<f64>>> {
    if rows.is_empty() {
        return None;
    }
    let mut mean = vec![0.0; m.dim()];
    for &r in rows {
        for (acc, x) in mean.iter_mut().zip(m.row(r)) {
            *acc += x;
        }
    }
    let k = rows.len() as f64;
    mean.iter_mut().for_each(|x| *x /= k);
    let n = norm(&mean);
    if n == 0.0 {
        return Some(Err(Error::ZeroVector));
    }
    mean.iter_mut().for_each(|x| *x /= n);
    Some(Ok(mean))
}

/// Pool every document present in a chunk matrix, preserving first-seen order.
pub fn pool_all(chunk_vectors: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, id) in chunk_vectors.ids().iter().enumerate() {
        let doc = split_chunk_id(id).map(|(d, _)| d).unwrap_or(id).to_string();
        let entry = groups.entry(doc.clone()).or_default();
        if entry.is_empty() {
            order.push(doc);
        }
        entry.push(i);
    }
    let mut data = Vec::with_capacity(order.len() * chunk_vectors.dim());
    for doc in &order {
        let v = pool_rows(chunk_vectors, &groups[doc]).expect("group is nonempty")?;
        data.extend(v);
    }
    EmbeddingMatrix::new(order, chunk_vectors.dim(), data, chunk_vectors.provider.clone())
}
