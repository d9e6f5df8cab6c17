//! Embedding providers and an exact cosine top-k index with a binary on-disk format.
//!
//! The index is a plain value: `&self` searches and `&mut self` upserts, so the
//! many-readers-or-one-writer contract is enforced by the borrow checker. Share
//! it behind an `Arc` (read-only) or an `RwLock` when writes are needed.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::http::{HttpError, JsonClient, RetryPolicy};

pub const INDEX_FORMAT_VERSION: u32 = 1;
const INDEX_MAGIC: &[u8; 8] = b"FLLMIDX\0";

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("text is empty after normalization")]
    EmptyText,
    #[error("vector has no components")]
    EmptyVector,
    #[error("vector has a non-finite component at {0}")]
    NonFinite(usize),
    #[error("vector has zero norm")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("provider returned {got} embeddings for {expected} inputs")]
    CountMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Http(#[from] HttpError),
}

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("dimension mismatch: index has {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("document {doc_id}: {source}")]
    BadVector {
        doc_id: String,
        #[source]
        source: EmbedError,
    },
    #[error("query vector: {0}")]
    BadQuery(EmbedError),
    #[error("index file i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an index file (bad magic)")]
    BadMagic,
    #[error("unsupported index format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("index file truncated: header declares {expected} records, read {read}")]
    Truncated { expected: u64, read: u64 },
    #[error("corrupt index file: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f32>,
    normalized: bool,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, EmbedError> {
        check_values(&values)?;
        Ok(EmbeddingVector {
            values,
            normalized: false,
        })
    }

    /// L2-normalizes `values`.
    pub fn normalized(mut values: Vec<f32>) -> Result<Self, EmbedError> {
        check_values(&values)?;
        let norm = l2(&values);
        if norm == 0.0 {
            return Err(EmbedError::ZeroVector);
        }
        for v in &mut values {
            *v = (f64::from(*v) / norm) as f32;
        }
        Ok(EmbeddingVector {
            values,
            normalized: true,
        })
    }

    pub fn dims(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn norm(&self) -> f64 {
        l2(&self.values)
    }
}

fn check_values(values: &[f32]) -> Result<(), EmbedError> {
    if values.is_empty() {
        return Err(EmbedError::EmptyVector);
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(EmbedError::NonFinite(i));
    }
    Ok(())
}

fn l2(values: &[f32]) -> f64 {
    values
        .iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

/// Cosine similarity, accumulated in f64.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    if a.dims() != b.dims() {
        return Err(EmbedError::DimMismatch {
            expected: a.dims(),
            got: b.dims(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    Ok(dot(&a.values, &b.values) / (na * nb))
}

pub trait EmbeddingProvider: Send + Sync {
    fn dims(&self) -> usize;

    /// Identifies the model and its configuration; persisted in index headers.
    fn fingerprint(&self) -> String;

    /// Embeds already-normalized, non-empty texts, preserving order.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError>;
}

pub(crate) fn normalize_text(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn embed(provider: &dyn EmbeddingProvider, text: &str) -> Result<EmbeddingVector, EmbedError> {
    let text = normalize_text(text);
    if text.is_empty() {
        return Err(EmbedError::EmptyText);
    }
    let mut out = provider.embed_batch(&[text])?;
    out.pop().ok_or(EmbedError::CountMismatch {
        expected: 1,
        got: 0,
    })
}

pub fn embed_many(
    provider: &dyn EmbeddingProvider,
    texts: &[String],
) -> Result<Vec<EmbeddingVector>, EmbedError> {
    let texts: Vec<String> = texts.iter().map(|t| normalize_text(t)).collect();
    if texts.iter().any(|t| t.is_empty()) {
        return Err(EmbedError::EmptyText);
    }
    provider.embed_batch(&texts)
}

/// Deterministic feature-hashing embedder for tests and offline runs.
///
/// Each lowercase alphanumeric token hashes (SHA-256 over seed and token) to
/// one slot and a weight in [0.5, 1.5); the accumulated vector is
/// L2-normalized. Weights are positive, so any shared token yields positive
/// similarity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockEmbedder {
    dims: usize,
    seed: u64,
}

impl MockEmbedder {
    pub const DEFAULT_DIMS: usize = 256;
    pub const DEFAULT_SEED: u64 = 0x5EED;

    pub fn new(dims: usize, seed: u64) -> Self {
        assert!(dims > 0, "mock embedder needs at least one dimension");
        MockEmbedder { dims, seed }
    }

    /// Slot and weight of one token.
    pub fn token_feature(&self, token: &str) -> (usize, f32) {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(token.as_bytes());
        let d = h.finalize();
        let slot = u64::from_le_bytes(d[0..8].try_into().unwrap()) % self.dims as u64;
        let frac = f64::from(u32::from_le_bytes(d[8..12].try_into().unwrap())) / 4_294_967_296.0;
        (slot as usize, (0.5 + frac) as f32)
    }

    pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(|t| t.to_lowercase())
    }

    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let mut v = vec![0f32; self.dims];
        let mut any = false;
        for tok in Self::tokens(text) {
            let (slot, w) = self.token_feature(&tok);
            v[slot] += w;
            any = true;
        }
        if !any {
            return Err(EmbedError::EmptyText);
        }
        EmbeddingVector::normalized(v)
    }
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIMS, Self::DEFAULT_SEED)
    }
}

impl EmbeddingProvider for MockEmbedder {
    fn dims(&self) -> usize {
        self.dims
    }

    fn fingerprint(&self) -> String {
        format!("mock-hash:dims={}:seed={}", self.dims, self.seed)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        texts.iter().map(|t| self.embed_text(t)).collect()
    }
}

/// Request body of the embeddings endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingsRequest {
    pub input: Vec<String>,
    pub model: String,
}

#[derive(Debug, Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Debug, Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f32>,
    #[serde(default)]
    index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpEmbedderConfig {
    pub base_url: String,
    pub model: String,
    pub dims: usize,
    pub api_key: Option<String>,
    pub batch_size: usize,
    pub retry: RetryPolicy,
}

/// Client for an OpenAI-style `POST <base>/v1/embeddings` endpoint.
pub struct HttpEmbedder {
    config: HttpEmbedderConfig,
    url: String,
    client: JsonClient,
}

impl HttpEmbedder {
    pub fn new(config: HttpEmbedderConfig) -> Self {
        let url = crate::http::join_url(&api_base(&config.base_url), "embeddings");
        let client = JsonClient::new(config.retry.clone(), config.api_key.clone());
        HttpEmbedder {
            config,
            url,
            client,
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.url
    }

    /// Serialized request body for `texts`, exactly as sent on the wire.
    pub fn request_body(&self, texts: &[String]) -> String {
        serde_json::to_string(&EmbeddingsRequest {
            input: texts.to_vec(),
            model: self.config.model.clone(),
        })
        .expect("request serializes")
    }
}

/// Appends `/v1` unless the base URL already ends with it.
pub(crate) fn api_base(base: &str) -> String {
    let trimmed = base.trim_end_matches('/');
    if trimmed.ends_with("/v1") {
        trimmed.to_string()
    } else {
        format!("{trimmed}/v1")
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn dims(&self) -> usize {
        self.config.dims
    }

    fn fingerprint(&self) -> String {
        format!("http:{}:dims={}", self.config.model, self.config.dims)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.config.batch_size.max(1)) {
            let value = self.client.post(&self.url, self.request_body(chunk))?;
            let mut resp: EmbeddingsResponse =
                serde_json::from_value(value).map_err(|e| HttpError::Decode {
                    endpoint: self.url.clone(),
                    message: e.to_string(),
                })?;
            if resp.data.len() != chunk.len() {
                return Err(EmbedError::CountMismatch {
                    expected: chunk.len(),
                    got: resp.data.len(),
                });
            }
            if resp.data.iter().all(|d| d.index.is_some()) {
                resp.data.sort_by_key(|d| d.index);
            }
            for datum in resp.data {
                if datum.embedding.len() != self.config.dims {
                    return Err(EmbedError::DimMismatch {
                        expected: self.config.dims,
                        got: datum.embedding.len(),
                    });
                }
                out.push(EmbeddingVector::normalized(datum.embedding)?);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DocKind {
    Item,
    Knowledge,
    Qa,
}

impl DocKind {
    fn to_byte(self) -> u8 {
        match self {
            DocKind::Item => 0,
            DocKind::Knowledge => 1,
            DocKind::Qa => 2,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(DocKind::Item),
            1 => Some(DocKind::Knowledge),
            2 => Some(DocKind::Qa),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DocTags {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occasion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic_category: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub doc_id: String,
    pub text: String,
    pub vector: EmbeddingVector,
    pub kind: DocKind,
    pub tags: DocTags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub doc_id: String,
    pub score: f64,
}

/// Conjunctive document filter: each populated field must match.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DocFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kinds: Option<Vec<DocKind>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occasion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic_category: Option<String>,
}

impl DocFilter {
    pub fn kinds(kinds: &[DocKind]) -> Self {
        DocFilter {
            kinds: Some(kinds.to_vec()),
            ..Default::default()
        }
    }

    pub fn matches(&self, doc: &DocumentRecord) -> bool {
        fn eq(want: &Option<String>, have: &Option<String>) -> bool {
            match want {
                None => true,
                Some(w) => have.as_deref().is_some_and(|h| h.eq_ignore_ascii_case(w)),
            }
        }
        self.kinds.as_ref().is_none_or(|k| k.contains(&doc.kind))
            && eq(&self.style, &doc.tags.style)
            && eq(&self.occasion, &doc.tags.occasion)
            && eq(&self.semantic_category, &doc.tags.semantic_category)
    }
}

fn hit_order(a: &SearchHit, b: &SearchHit) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.doc_id.cmp(&b.doc_id))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dims: usize,
    fingerprint: String,
    docs: Vec<DocumentRecord>,
    norms: Vec<f64>,
    positions: HashMap<String, usize>,
}

impl VectorIndex {
    pub fn new(dims: usize, fingerprint: impl Into<String>) -> Self {
        VectorIndex {
            dims,
            fingerprint: fingerprint.into(),
            docs: Vec::new(),
            norms: Vec::new(),
            positions: HashMap::new(),
        }
    }

    pub fn for_provider(provider: &dyn EmbeddingProvider) -> Self {
        Self::new(provider.dims(), provider.fingerprint())
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn get(&self, doc_id: &str) -> Option<&DocumentRecord> {
        self.positions.get(doc_id).map(|&i| &self.docs[i])
    }

    pub fn docs(&self) -> impl Iterator<Item = &DocumentRecord> {
        self.docs.iter()
    }

    /// Inserts or replaces documents by `doc_id`. All documents are validated
    /// before any is applied, so a failing batch leaves the index unchanged.
    /// Returns the index size afterwards.
    pub fn upsert(&mut self, docs: Vec<DocumentRecord>) -> Result<usize, IndexError> {
        for doc in &docs {
            if doc.vector.dims() != self.dims {
                return Err(IndexError::DimMismatch {
                    expected: self.dims,
                    got: doc.vector.dims(),
                });
            }
            if doc.vector.norm() == 0.0 {
                return Err(IndexError::BadVector {
                    doc_id: doc.doc_id.clone(),
                    source: EmbedError::ZeroVector,
                });
            }
        }
        for doc in docs {
            let norm = doc.vector.norm();
            match self.positions.get(&doc.doc_id) {
                Some(&i) => {
                    self.docs[i] = doc;
                    self.norms[i] = norm;
                }
                None => {
                    self.positions.insert(doc.doc_id.clone(), self.docs.len());
                    self.docs.push(doc);
                    self.norms.push(norm);
                }
            }
        }
        Ok(self.docs.len())
    }

    /// Exact top-k by cosine similarity over documents passing `filter`.
    pub fn search_topk(
        &self,
        query: &EmbeddingVector,
        k: usize,
        filter: Option<&DocFilter>,
    ) -> Result<Vec<SearchHit>, IndexError> {
        match filter {
            Some(f) => self.search_topk_by(query, k, |d| f.matches(d)),
            None => self.search_topk_by(query, k, |_| true),
        }
    }

    pub fn search_topk_by(
        &self,
        query: &EmbeddingVector,
        k: usize,
        predicate: impl Fn(&DocumentRecord) -> bool,
    ) -> Result<Vec<SearchHit>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if query.dims() != self.dims {
            return Err(IndexError::DimMismatch {
                expected: self.dims,
                got: query.dims(),
            });
        }
        let qn = query.norm();
        if qn == 0.0 {
            return Err(IndexError::BadQuery(EmbedError::ZeroVector));
        }
        let mut hits: Vec<SearchHit> = self
            .docs
            .iter()
            .zip(&self.norms)
            .filter(|(d, _)| predicate(d))
            .map(|(d, &n)| SearchHit {
                doc_id: d.doc_id.clone(),
                score: dot(query.values(), d.vector.values()) / (qn * n),
            })
            .collect();
        if hits.len() > k {
            hits.select_nth_unstable_by(k - 1, hit_order);
            hits.truncate(k);
        }
        hits.sort_by(hit_order);
        Ok(hits)
    }

    /// Writes the index in the little-endian binary format.
    ///
    /// Layout: magic `FLLMIDX\0`, u32 version, u32 dims, u64 count,
    /// string fingerprint, then `count` records of
    /// {string doc_id, u8 kind, string text, 3 × optional string tag,
    /// u8 normalized, dims × f32}. Strings are u32 byte length + UTF-8;
    /// optional strings are a u8 presence flag followed by a string.
    pub fn persist(&self, path: &Path) -> Result<(), IndexError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&INDEX_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.dims as u32).to_le_bytes())?;
        w.write_all(&(self.docs.len() as u64).to_le_bytes())?;
        write_str(&mut w, &self.fingerprint)?;
        for doc in &self.docs {
            write_str(&mut w, &doc.doc_id)?;
            w.write_all(&[doc.kind.to_byte()])?;
            write_str(&mut w, &doc.text)?;
            for tag in [&doc.tags.style, &doc.tags.occasion, &doc.tags.semantic_category] {
                match tag {
                    Some(t) => {
                        w.write_all(&[1])?;
                        write_str(&mut w, t)?;
                    }
                    None => w.write_all(&[0])?,
                }
            }
            w.write_all(&[u8::from(doc.vector.is_normalized())])?;
            for v in doc.vector.values() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| IndexError::BadMagic)?;
        if &magic != INDEX_MAGIC {
            return Err(IndexError::BadMagic);
        }
        let header_err = |e: std::io::Error| IndexError::Corrupt(format!("header: {e}"));
        let version = read_u32(&mut r).map_err(header_err)?;
        if version != INDEX_FORMAT_VERSION {
            return Err(IndexError::VersionMismatch {
                found: version,
                expected: INDEX_FORMAT_VERSION,
            });
        }
        let dims = read_u32(&mut r).map_err(header_err)? as usize;
        let count = read_u64(&mut r).map_err(header_err)?;
        let fingerprint = read_str(&mut r).map_err(header_err)?;
        let mut index = VectorIndex::new(dims, fingerprint);
        let mut records = Vec::new();
        for read in 0..count {
            let truncated = |e: std::io::Error| {
                if e.kind() == std::io::ErrorKind::UnexpectedEof {
                    IndexError::Truncated {
                        expected: count,
                        read,
                    }
                } else {
                    IndexError::Corrupt(e.to_string())
                }
            };
            records.push(read_record(&mut r, dims).map_err(truncated)?);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(IndexError::Corrupt(format!(
                "trailing bytes after {count} records"
            )));
        }
        let doc_ids: std::collections::HashSet<&str> =
            records.iter().map(|d| d.doc_id.as_str()).collect();
        if doc_ids.len() != records.len() {
            return Err(IndexError::Corrupt("duplicate doc_id".into()));
        }
        index.upsert(records)?;
        Ok(index)
    }
}

fn read_record(r: &mut impl Read, dims: usize) -> std::io::Result<DocumentRecord> {
    let doc_id = read_str(r)?;
    let kind_byte = read_u8(r)?;
    let kind = DocKind::from_byte(kind_byte).ok_or_else(|| invalid(format!("kind {kind_byte}")))?;
    let text = read_str(r)?;
    let mut tags = [None, None, None];
    for tag in &mut tags {
        *tag = match read_u8(r)? {
            0 => None,
            1 => Some(read_str(r)?),
            b => return Err(invalid(format!("tag flag {b}"))),
        };
    }
    let normalized = read_u8(r)? != 0;
    let mut values = Vec::with_capacity(dims);
    let mut buf = [0u8; 4];
    for _ in 0..dims {
        r.read_exact(&mut buf)?;
        values.push(f32::from_le_bytes(buf));
    }
    check_values(&values).map_err(|e| invalid(format!("{doc_id}: {e}")))?;
    let [style, occasion, semantic_category] = tags;
    Ok(DocumentRecord {
        doc_id,
        text,
        vector: EmbeddingVector { values, normalized },
        kind,
        tags: DocTags {
            style,
            occasion,
            semantic_category,
        },
    })
}

fn invalid(msg: String) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, msg)
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u8(r: &mut impl Read) -> std::io::Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> std::io::Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| invalid(e.to_string()))
}
