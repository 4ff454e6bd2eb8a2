//! Sentence encoders, vector normalization and the XLPV1 vector store.
//!
//! Real multilingual encoders run out of process and hand their output over
//! as XLPV1 files; [`HashNgramEncoder`] is the in-process, dependency-free
//! stand-in used for desk-scale runs and tests.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::hash::Hasher;
use std::io::Write;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::{Database, EvalSet, HRL_LANG};
use crate::text::normalize_query;

pub const STORE_MAGIC: &[u8; 6] = b"XLPV1\0";
const NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("cannot encode empty text")]
    EmptyText,
    #[error("embedding dim must be at least {min}, got {dim}")]
    DimTooSmall { dim: usize, min: usize },
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("no precomputed embedding for {lang} text {text:?}")]
    Missing { lang: String, text: String },
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: not an XLPV1 vector store")]
    BadMagic,
    #[error("truncated vector store: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated {
        offset: usize,
        needed: usize,
        len: usize,
    },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("dim mismatch: store has dim {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("vector store dim must be positive")]
    ZeroDim,
    #[error("entry {index}: id is not valid UTF-8")]
    InvalidId { index: usize },
    #[error("id `{0}` exceeds 65535 bytes")]
    IdTooLong(String),
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("vector for `{id}` has norm {norm}, store is flagged normalized")]
    NotNormalized { id: String, norm: f64 },
    #[error("invalid meta trailer: {0}")]
    Meta(String),
    #[error("{0} unexpected bytes after meta trailer")]
    TrailingBytes(usize),
    #[error("store was written by encoder `{found}`, expected `{expected}`")]
    EncoderMismatch { expected: String, found: String },
    #[error("no vector for id `{0}`")]
    MissingId(String),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Self {
        Self { values }
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
        norm(&self.values)
    }
}

/// Inner product accumulated in f64, left to right.
///
/// Every similarity in the crate goes through this one routine so scores
/// computed on different paths compare bitwise.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .fold(0.0f64, |acc, (&x, &y)| acc + x as f64 * y as f64)
}

pub fn norm(v: &[f32]) -> f64 {
    dot(v, v).sqrt()
}

pub fn is_unit(v: &[f32]) -> bool {
    (norm(v) - 1.0).abs() <= NORM_TOLERANCE
}

pub fn l2_normalize(v: &EmbeddingVector) -> Result<EmbeddingVector, EncodeError> {
    let n = v.norm();
    if n == 0.0 || !n.is_finite() {
        return Err(EncodeError::ZeroVector);
    }
    Ok(EmbeddingVector::new(
        v.values.iter().map(|&x| (x as f64 / n) as f32).collect(),
    ))
}

/// A deterministic sentence encoder: the same `(text, lang)` must always
/// produce bitwise-identical output of length `dim()`.
pub trait Encoder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn encode(&self, text: &str, lang: &str) -> Result<EmbeddingVector, EncodeError>;
}

/// Character 3-gram feature hashing over the normalized text.
///
/// The language tag is ignored, so identical strings embed identically in
/// every language while translations do not collide.
#[derive(Debug, Clone)]
pub struct HashNgramEncoder {
    dim: usize,
    name: String,
}

pub const MIN_HASH_DIM: usize = 8;

impl HashNgramEncoder {
    pub fn new(dim: usize) -> Result<Self, EncodeError> {
        if dim < MIN_HASH_DIM {
            return Err(EncodeError::DimTooSmall {
                dim,
                min: MIN_HASH_DIM,
            });
        }
        Ok(Self {
            dim,
            name: format!("hash-ngram-{dim}"),
        })
    }
}

pub fn hash_ngram_encode(text: &str, dim: usize) -> Result<EmbeddingVector, EncodeError> {
    if dim < MIN_HASH_DIM {
        return Err(EncodeError::DimTooSmall {
            dim,
            min: MIN_HASH_DIM,
        });
    }
    let normalized = normalize_query(text);
    if normalized.is_empty() {
        return Err(EncodeError::EmptyText);
    }
    let chars: Vec<char> = normalized.chars().collect();
    let grams: Vec<String> = if chars.len() < 3 {
        vec![normalized]
    } else {
        chars.windows(3).map(|w| w.iter().collect()).collect()
    };

    let mut signed = vec![0f32; dim];
    let mut unsigned = vec![0f32; dim];
    for gram in &grams {
        let mut hasher = FnvHasher::default();
        hasher.write(gram.as_bytes());
        let h = hasher.finish();
        let bucket = (h % dim as u64) as usize;
        signed[bucket] += if h >> 63 == 1 { -1.0 } else { 1.0 };
        unsigned[bucket] += 1.0;
    }
    // Signed collisions can cancel out completely; fall back to counts.
    let raw = if signed.iter().any(|&x| x != 0.0) {
        signed
    } else {
        unsigned
    };
    l2_normalize(&EmbeddingVector::new(raw))
}

impl Encoder for HashNgramEncoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str, _lang: &str) -> Result<EmbeddingVector, EncodeError> {
        hash_ngram_encode(text, self.dim)
    }
}

/// Serves vectors computed offline, looked up by `(lang, text)`.
#[derive(Debug, Clone)]
pub struct PrecomputedEncoder {
    name: String,
    dim: usize,
    table: HashMap<(String, String), Vec<f32>>,
}

impl PrecomputedEncoder {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            name: name.to_owned(),
            dim,
            table: HashMap::new(),
        }
    }

    /// Registers every database query whose id has a vector in `store`.
    pub fn add_database(&mut self, db: &Database, store: &VectorStore) -> Result<(), StoreError> {
        self.check(store)?;
        for (q, _) in db.iter() {
            if let Some(v) = store.get(&q.id) {
                self.table
                    .insert((HRL_LANG.to_owned(), q.text.clone()), v.to_vec());
            }
        }
        Ok(())
    }

    /// Registers LRL eval queries by their example id.
    pub fn add_eval_set(&mut self, eval: &EvalSet, store: &VectorStore) -> Result<(), StoreError> {
        self.check(store)?;
        for example in &eval.examples {
            let q = &example.lrl_query;
            let v = store
                .get(&q.id)
                .ok_or_else(|| StoreError::MissingId(q.id.clone()))?;
            self.table
                .insert((q.lang.clone(), q.text.clone()), v.to_vec());
        }
        Ok(())
    }

    pub fn insert(&mut self, lang: &str, text: &str, vector: EmbeddingVector) {
        self.table
            .insert((lang.to_owned(), text.to_owned()), vector.into_values());
    }

    fn check(&self, store: &VectorStore) -> Result<(), StoreError> {
        store.check_encoder(&self.name)?;
        if store.dim() != self.dim {
            return Err(StoreError::DimMismatch {
                expected: self.dim,
                found: store.dim(),
            });
        }
        Ok(())
    }
}

impl Encoder for PrecomputedEncoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str, lang: &str) -> Result<EmbeddingVector, EncodeError> {
        self.table
            .get(&(lang.to_owned(), text.to_owned()))
            .map(|v| EmbeddingVector::new(v.clone()))
            .ok_or_else(|| EncodeError::Missing {
                lang: lang.to_owned(),
                text: text.to_owned(),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreMeta {
    pub encoder: String,
    pub normalized: bool,
    /// Writer-specific keys, carried through load/save untouched.
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl StoreMeta {
    pub fn new(encoder: &str) -> Self {
        Self {
            encoder: encoder.to_owned(),
            normalized: true,
            extra: BTreeMap::new(),
        }
    }
}

/// Id-keyed vectors sharing one dimensionality, kept in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    positions: HashMap<String, usize>,
    pub meta: StoreMeta,
}

impl VectorStore {
    pub fn new(dim: usize, meta: StoreMeta) -> Result<Self, StoreError> {
        if dim == 0 {
            return Err(StoreError::ZeroDim);
        }
        Ok(Self {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            positions: HashMap::new(),
            meta,
        })
    }

    pub fn push(&mut self, id: &str, vector: &[f32]) -> Result<(), StoreError> {
        if vector.len() != self.dim {
            return Err(StoreError::DimMismatch {
                expected: self.dim,
                found: vector.len(),
            });
        }
        if id.len() > u16::MAX as usize {
            return Err(StoreError::IdTooLong(id.to_owned()));
        }
        if self.positions.contains_key(id) {
            return Err(StoreError::DuplicateId(id.to_owned()));
        }
        if self.meta.normalized && !is_unit(vector) {
            return Err(StoreError::NotNormalized {
                id: id.to_owned(),
                norm: norm(vector),
            });
        }
        self.positions.insert(id.to_owned(), self.ids.len());
        self.ids.push(id.to_owned());
        self.data.extend_from_slice(vector);
        Ok(())
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

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.positions.get(id).map(|&i| self.vector(i))
    }

    pub fn vector(&self, index: usize) -> &[f32] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids
            .iter()
            .zip(self.data.chunks_exact(self.dim))
            .map(|(id, v)| (id.as_str(), v))
    }

    /// Every vector unit-norm within tolerance.
    pub fn all_unit(&self) -> bool {
        self.data.chunks_exact(self.dim).all(is_unit)
    }

    /// Loading vectors produced by one encoder into a pipeline configured
    /// for another mixes embedding spaces; refuse it.
    pub fn check_encoder(&self, expected: &str) -> Result<(), StoreError> {
        if self.meta.encoder != expected {
            return Err(StoreError::EncoderMismatch {
                expected: expected.to_owned(),
                found: self.meta.encoder.clone(),
            });
        }
        Ok(())
    }

    /// Keeps only the given ids, in the given order.
    pub fn subset<'a, I>(&self, ids: I) -> Result<Self, StoreError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut out = Self::new(self.dim, self.meta.clone())?;
        for id in ids {
            let v = self
                .get(id)
                .ok_or_else(|| StoreError::MissingId(id.to_owned()))?;
            out.push(id, v)?;
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(18 + self.data.len() * 4 + self.ids.len() * 8);
        buf.extend_from_slice(STORE_MAGIC);
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for (id, v) in self.iter() {
            buf.extend_from_slice(&(id.len() as u16).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("serializable meta");
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < STORE_MAGIC.len() || &bytes[..STORE_MAGIC.len()] != STORE_MAGIC {
            return Err(StoreError::BadMagic);
        }
        r.pos = STORE_MAGIC.len();
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err(StoreError::ZeroDim);
        }
        let count = r.u64()? as usize;

        let mut ids = Vec::with_capacity(count.min(1 << 20));
        let mut data = Vec::with_capacity(count.min(1 << 20) * dim);
        for index in 0..count {
            let len = r.u16()? as usize;
            let raw = r.take(len)?;
            let id = std::str::from_utf8(raw).map_err(|_| StoreError::InvalidId { index })?;
            ids.push(id.to_owned());
            let raw = r.take(dim * 4)?;
            data.extend(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
            );
        }
        let body_end = r.pos;
        let stored = r.u32()?;
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(StoreError::ChecksumMismatch { stored, computed });
        }
        let meta_len = r.u32()? as usize;
        let meta_raw = r.take(meta_len)?;
        let meta: StoreMeta =
            serde_json::from_slice(meta_raw).map_err(|e| StoreError::Meta(e.to_string()))?;
        if r.pos != bytes.len() {
            return Err(StoreError::TrailingBytes(bytes.len() - r.pos));
        }
        if let Some(declared) = meta.extra.get("dim").and_then(Value::as_u64) {
            if declared as usize != dim {
                return Err(StoreError::DimMismatch {
                    expected: dim,
                    found: declared as usize,
                });
            }
        }

        let mut store = Self::new(dim, meta)?;
        for (i, id) in ids.iter().enumerate() {
            store.push(id, &data[i * dim..(i + 1) * dim])?;
        }
        Ok(store)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(StoreError::Truncated {
                offset: self.pos,
                needed: n,
                len: self.bytes.len(),
            }),
        }
    }

    fn u16(&mut self) -> Result<u16, StoreError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, StoreError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, StoreError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Writes through a sibling temp file and renames it into place.
pub fn save_vector_store(store: &VectorStore, path: &Path) -> Result<(), StoreError> {
    let io = |source| StoreError::Io {
        path: path.to_owned(),
        source,
    };
    let mut tmp_name = path.as_os_str().to_owned();
    tmp_name.push(".tmp");
    let tmp = PathBuf::from(tmp_name);
    {
        let mut file = fs::File::create(&tmp).map_err(io)?;
        file.write_all(&store.to_bytes()).map_err(io)?;
        file.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_vector_store(path: &Path) -> Result<VectorStore, StoreError> {
    let bytes = fs::read(path).map_err(|source| StoreError::Io {
        path: path.to_owned(),
        source,
    })?;
    VectorStore::from_bytes(&bytes)
}

/// Encodes every database query under its record id.
pub fn embed_database(db: &Database, encoder: &dyn Encoder) -> Result<VectorStore, StoreError> {
    let mut store = VectorStore::new(encoder.dim(), StoreMeta::new(encoder.name()))?;
    for (q, _) in db.iter() {
        let v = encoder.encode(&q.text, &q.lang)?;
        store.push(&q.id, v.values())?;
    }
    Ok(store)
}

/// Encodes the LRL queries of an eval set under their example ids.
pub fn embed_eval_set(eval: &EvalSet, encoder: &dyn Encoder) -> Result<VectorStore, StoreError> {
    let mut store = VectorStore::new(encoder.dim(), StoreMeta::new(encoder.name()))?;
    for example in &eval.examples {
        let q = &example.lrl_query;
        if store.get(&q.id).is_some() {
            continue;
        }
        let v = encoder.encode(&q.text, &q.lang)?;
        store.push(&q.id, v.values())?;
    }
    Ok(store)
}
