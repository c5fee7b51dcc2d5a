//! Fixed-dimension embedding stores.
//!
//! Pretrained encoders are outside this crate. Their outputs arrive as
//! store files, or are replaced by [`DeterministicEncoder`], a seeded
//! bag-of-tokens hash encoder whose dot products track token overlap.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! b"EMB1" | u32 dim | u32 count | count × { u32 key_len | key bytes (UTF-8) | dim × f32 }
//! ```
//!
//! A JSONL variant with one `{"key": ..., "vector": [...]}` object per line
//! is also accepted.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const STORE_MAGIC: &[u8; 4] = b"EMB1";

/// Norm tolerance for the `normalized` flag of a store.
pub const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(EmbeddingVector { values })
    }

    pub fn zeros(dim: usize) -> Self {
        EmbeddingVector {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    /// Dot product accumulated in f64.
    pub fn dot(&self, other: &EmbeddingVector) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::shape(
                "dot",
                format!("{} vs {}", self.dim(), other.dim()),
            ));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum())
    }
}

pub fn normalize(v: &EmbeddingVector) -> Result<EmbeddingVector> {
    let norm = v.norm();
    if norm == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(EmbeddingVector {
        values: v
            .values
            .iter()
            .map(|&x| (f64::from(x) / norm) as f32)
            .collect(),
    })
}

/// Lowercased whitespace tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// First `max_tokens` whitespace tokens, re-joined with single spaces.
pub fn truncate_tokens(text: &str, max_tokens: usize) -> String {
    text.split_whitespace()
        .take(max_tokens)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Store key for a piece of text: lowercase hex SHA-256 of its UTF-8 bytes.
pub fn text_key(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Combine seeds into one well-mixed 64-bit seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5851_f42d_4c95_7f2d, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Token used in place of the empty token multiset, so that `""` maps to a
/// fixed unit vector.
const EMPTY_TEXT_TOKEN: &str = "\u{0}<empty>";

/// Seeded bag-of-tokens encoder.
///
/// Every lowercased whitespace token gets a Gaussian vector drawn from a
/// ChaCha stream keyed by `(seed, token)`. A text maps to the normalized
/// sum over its token multiset, so shared tokens raise the dot product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeterministicEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl DeterministicEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim >= 1, "encoder dimension must be positive");
        DeterministicEncoder { dim, seed }
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.seed, fnv1a(token.as_bytes())]));
        (0..self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    }

    pub fn encode(&self, text: &str) -> EmbeddingVector {
        let mut tokens = tokenize(text);
        if tokens.is_empty() {
            tokens.push(EMPTY_TEXT_TOKEN.to_string());
        }
        let mut acc = vec![0.0f64; self.dim];
        for t in &tokens {
            for (a, v) in acc.iter_mut().zip(self.token_vector(t)) {
                *a += v;
            }
        }
        let mut norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            // Tokens cancelled exactly; fall back to the first token's vector.
            acc = self.token_vector(&tokens[0]);
            norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        EmbeddingVector {
            values: acc.iter().map(|v| (v / norm) as f32).collect(),
        }
    }
}

pub fn deterministic_encode(text: &str, dim: usize, seed: u64) -> EmbeddingVector {
    DeterministicEncoder::new(dim, seed).encode(text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    entries: IndexMap<String, EmbeddingVector>,
    normalized: bool,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("store dimension must be positive".into()));
        }
        Ok(EmbeddingStore {
            dim,
            entries: IndexMap::new(),
            normalized: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// True when every entry has unit L2 norm (within 1e-4).
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn insert(&mut self, key: impl Into<String>, v: EmbeddingVector) -> Result<()> {
        if v.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                record: self.entries.len(),
                expected: self.dim,
                found: v.dim(),
            });
        }
        self.normalized &= (v.norm() - 1.0).abs() <= NORM_TOLERANCE;
        self.entries.insert(key.into(), v);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<&EmbeddingVector> {
        self.entries
            .get(key)
            .ok_or_else(|| Error::MissingKey(key.to_string()))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &EmbeddingVector)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let is_binary = reader
            .fill_buf()
            .map_err(|e| Error::io(path, e))?
            .starts_with(STORE_MAGIC);
        if is_binary || !looks_like_json(path) {
            Self::read_binary(reader)
        } else {
            Self::read_jsonl(reader)
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_binary(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(STORE_MAGIC)?;
        w.write_all(&u32_len(self.dim)?.to_le_bytes())?;
        w.write_all(&u32_len(self.entries.len())?.to_le_bytes())?;
        for (key, v) in &self.entries {
            w.write_all(&u32_len(key.len())?.to_le_bytes())?;
            w.write_all(key.as_bytes())?;
            for x in &v.values {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact_or(&mut r, &mut magic, "header")?;
        if &magic != STORE_MAGIC {
            return Err(Error::BadMagic {
                expected: "EMB1".into(),
                found: magic.to_vec(),
            });
        }
        let dim = read_u32(&mut r, "header dim")? as usize;
        let count = read_u32(&mut r, "header count")? as usize;
        let mut store = EmbeddingStore::new(dim)?;
        for record in 0..count {
            let key_len = read_u32(&mut r, "key length")? as usize;
            let key_bytes = read_bounded(&mut r, key_len)?;
            if key_bytes.len() != key_len {
                return Err(Error::Corrupt(format!("record {record}: truncated key")));
            }
            let key = String::from_utf8(key_bytes)
                .map_err(|_| Error::Corrupt(format!("record {record}: key is not UTF-8")))?;
            let payload = read_bounded(&mut r, dim.saturating_mul(4))?;
            if payload.len() != dim * 4 {
                return Err(Error::DimensionMismatch {
                    record,
                    expected: dim,
                    found: payload.len() / 4,
                });
            }
            let values: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let v = EmbeddingVector::new(values)
                .map_err(|e| Error::Corrupt(format!("record {record}: {e}")))?;
            if store.contains(&key) {
                return Err(Error::Corrupt(format!("record {record}: duplicate key {key:?}")));
            }
            store.insert(key, v)?;
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Corrupt("trailing bytes after last record".into()));
        }
        Ok(store)
    }

    pub fn read_jsonl<R: Read>(r: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Line {
            key: String,
            vector: Vec<f32>,
        }
        let mut store: Option<EmbeddingStore> = None;
        let mut record = 0;
        for line in BufReader::new(r).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line)
                .map_err(|e| Error::Corrupt(format!("record {record}: {e}")))?;
            let s = match &mut store {
                Some(s) => s,
                None => store.insert(EmbeddingStore::new(parsed.vector.len())?),
            };
            if parsed.vector.len() != s.dim {
                return Err(Error::DimensionMismatch {
                    record,
                    expected: s.dim,
                    found: parsed.vector.len(),
                });
            }
            if s.contains(&parsed.key) {
                return Err(Error::Corrupt(format!(
                    "record {record}: duplicate key {:?}",
                    parsed.key
                )));
            }
            let v = EmbeddingVector::new(parsed.vector)
                .map_err(|e| Error::Corrupt(format!("record {record}: {e}")))?;
            s.insert(parsed.key, v)?;
            record += 1;
        }
        store.ok_or_else(|| Error::Corrupt("JSONL store has no records".into()))
    }
}

fn looks_like_json(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl") | Some("json")
    )
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Corrupt(format!("{n} does not fit in u32")))
}

pub(crate) fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Corrupt(format!("unexpected end of file reading {what}")))
}

pub(crate) fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Read up to `len` bytes without trusting `len` for the allocation size.
pub(crate) fn read_bounded<R: Read>(r: &mut R, len: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(len.min(1 << 16));
    r.take(len as u64).read_to_end(&mut buf)?;
    Ok(buf)
}

/// Source of sentence-level text embeddings: a store keyed by
/// [`text_key`], or the deterministic encoder.
#[derive(Debug, Clone)]
pub enum TextEmbedder {
    Store(Arc<EmbeddingStore>),
    Deterministic(DeterministicEncoder),
}

impl TextEmbedder {
    pub fn dim(&self) -> usize {
        match self {
            TextEmbedder::Store(s) => s.dim(),
            TextEmbedder::Deterministic(e) => e.dim,
        }
    }

    /// Unit-normalized embedding of `text`.
    pub fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        match self {
            TextEmbedder::Store(s) => {
                let key = text_key(text);
                let v = s.get(&key).map_err(|_| {
                    let preview: String = text.chars().take(40).collect();
                    Error::MissingKey(format!("{key} (text {preview:?})"))
                })?;
                normalize(v)
            }
            TextEmbedder::Deterministic(e) => Ok(e.encode(text)),
        }
    }
}

/// Source of image embeddings, looked up by the dataset's image key.
#[derive(Debug, Clone)]
pub enum ImageEmbedder {
    Store(Arc<EmbeddingStore>),
    /// Encodes the key string itself; only meaningful for smoke runs.
    Deterministic(DeterministicEncoder),
}

impl ImageEmbedder {
    pub fn dim(&self) -> usize {
        match self {
            ImageEmbedder::Store(s) => s.dim(),
            ImageEmbedder::Deterministic(e) => e.dim,
        }
    }

    pub fn embed(&self, key: &str) -> Result<EmbeddingVector> {
        match self {
            ImageEmbedder::Store(s) => normalize(s.get(key)?),
            ImageEmbedder::Deterministic(e) => Ok(e.encode(key)),
        }
    }
}

/// Token-level word vectors. Out-of-vocabulary tokens map to zeros.
#[derive(Debug, Clone)]
pub enum WordVectors {
    Store(Arc<EmbeddingStore>),
    Deterministic(DeterministicEncoder),
}

impl WordVectors {
    pub fn dim(&self) -> usize {
        match self {
            WordVectors::Store(s) => s.dim(),
            WordVectors::Deterministic(e) => e.dim,
        }
    }

    pub fn lookup(&self, token: &str) -> EmbeddingVector {
        match self {
            WordVectors::Store(s) => s
                .get(token)
                .cloned()
                .unwrap_or_else(|_| EmbeddingVector::zeros(s.dim())),
            WordVectors::Deterministic(e) => e.encode(token),
        }
    }
}
