//! Text embedding and exact top-k cosine retrieval over memory entries.
//!
//! The default index is a brute-force scan: every entry is scored against
//! the query and ranked by descending similarity, ties broken by ascending
//! id. Entries without a cached embedding are embedded on demand and the
//! result is cached on the entry.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{EntryId, MemoryState};
use crate::par::{self, Exec};

pub const DEFAULT_DIMENSION: usize = 256;
pub const DEFAULT_NGRAM: usize = 3;
pub const DEFAULT_TOP_K: usize = 6;

/// Scores closer than this are ranked as ties.
const RANK_RESOLUTION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RetrievalError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("retrieval query is empty")]
    EmptyQuery,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("embedding has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding provider returned a zero vector")]
    ZeroVector,
}

/// Unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Arc<[f64]>);

impl Embedding {
    /// L2-normalizes `values`.
    pub fn normalized(values: Vec<f64>) -> Result<Self, RetrievalError> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(RetrievalError::ZeroVector);
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(other.0.iter()).map(|(a, b)| a * b).sum()
    }
}

pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Embedding, RetrievalError>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, RetrievalError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

/// Feature-hashing embedder over per-word character n-grams.
///
/// Text is lowercased and split into alphanumeric words; each word
/// contributes its character n-grams (or itself, when shorter than `n`).
/// Grams are hashed with 64-bit FNV-1a into `dimension` buckets, counted,
/// and the count vector is L2-normalized.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dimension: usize,
    ngram: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIMENSION, DEFAULT_NGRAM)
    }
}

impl HashEmbedder {
    pub fn new(dimension: usize, ngram: usize) -> Self {
        assert!(
            dimension > 0 && ngram > 0,
            "dimension and ngram must be positive"
        );
        Self { dimension, ngram }
    }

    /// Raw bucket counts before normalization.
    pub fn counts(&self, text: &str) -> Vec<u32> {
        let mut counts = vec![0u32; self.dimension];
        for gram in ngrams(text, self.ngram) {
            counts[bucket(&gram, self.dimension)] += 1;
        }
        counts
    }
}

impl Embedder for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Embedding, RetrievalError> {
        if text.trim().is_empty() {
            return Err(RetrievalError::EmptyText);
        }
        let counts = self.counts(text);
        Embedding::normalized(counts.into_iter().map(f64::from).collect())
    }
}

/// Character n-grams of every word in `text`.
pub fn ngrams(text: &str, n: usize) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut words: Vec<Vec<char>> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.chars().collect())
        .collect();
    if words.is_empty() {
        // Punctuation-only text still gets a representation.
        let trimmed = lower.trim();
        if trimmed.is_empty() {
            return Vec::new();
        }
        words.push(trimmed.chars().collect());
    }
    let mut grams = Vec::new();
    for word in words {
        if word.len() <= n {
            grams.push(word.into_iter().collect());
        } else {
            grams.extend(word.windows(n).map(|w| w.iter().collect::<String>()));
        }
    }
    grams
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn bucket(gram: &str, dimension: usize) -> usize {
    (fnv1a64(gram.as_bytes()) % dimension as u64) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteEmbedderConfig {
    pub endpoint: String,
    pub dimension: usize,
    #[serde(default = "default_embed_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_embed_timeout_secs() -> u64 {
    30
}

/// Embeddings over HTTP: `{"input": [str]}` -> `{"embeddings": [[float]]}`.
pub struct RemoteEmbedder {
    config: RemoteEmbedderConfig,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    input: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteEmbedderConfig) -> Result<Self, RetrievalError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| RetrievalError::ProviderUnavailable(e.to_string()))?;
        Ok(Self { config, client })
    }
}

impl Embedder for RemoteEmbedder {
    fn dimension(&self) -> usize {
        self.config.dimension
    }

    fn embed(&self, text: &str) -> Result<Embedding, RetrievalError> {
        self.embed_batch(&[text])?
            .pop()
            .ok_or_else(|| RetrievalError::ProviderUnavailable("empty response".into()))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, RetrievalError> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(RetrievalError::EmptyText);
        }
        let unavailable = |e: reqwest::Error| RetrievalError::ProviderUnavailable(e.to_string());
        let response = self
            .client
            .post(&self.config.endpoint)
            .json(&EmbedRequest { input: texts })
            .send()
            .map_err(unavailable)?
            .error_for_status()
            .map_err(unavailable)?;
        let body: EmbedResponse = response.json().map_err(unavailable)?;
        if body.embeddings.len() != texts.len() {
            return Err(RetrievalError::ProviderUnavailable(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                body.embeddings.len()
            )));
        }
        body.embeddings
            .into_iter()
            .map(|v| {
                if v.len() != self.config.dimension {
                    return Err(RetrievalError::DimensionMismatch {
                        expected: self.config.dimension,
                        got: v.len(),
                    });
                }
                Embedding::normalized(v)
            })
            .collect()
    }
}

/// Serializable provider selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EmbeddingProvider {
    DeterministicHash { dimension: usize, ngram: usize },
    RemoteService(RemoteEmbedderConfig),
}

impl Default for EmbeddingProvider {
    fn default() -> Self {
        EmbeddingProvider::DeterministicHash {
            dimension: DEFAULT_DIMENSION,
            ngram: DEFAULT_NGRAM,
        }
    }
}

impl EmbeddingProvider {
    pub fn build(&self) -> Result<Arc<dyn Embedder>, RetrievalError> {
        Ok(match self {
            EmbeddingProvider::DeterministicHash { dimension, ngram } => {
                Arc::new(HashEmbedder::new(*dimension, *ngram))
            }
            EmbeddingProvider::RemoteService(cfg) => Arc::new(RemoteEmbedder::new(cfg.clone())?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: EntryId,
    pub similarity: f64,
}

/// Fills the embedding cache for every entry that lacks a usable vector.
pub fn ensure_embeddings(
    state: &MemoryState,
    embedder: &dyn Embedder,
    exec: Exec,
) -> Result<(), RetrievalError> {
    let dim = embedder.dimension();
    let missing: Vec<_> = state
        .entries()
        .filter(|e| e.embedding().is_none_or(|v| v.dimension() != dim))
        .collect();
    if missing.is_empty() {
        return Ok(());
    }
    let texts: Vec<&str> = missing.iter().map(|e| e.content.as_str()).collect();
    let vectors = if exec.is_parallel() {
        par::try_map(exec, &texts, |t| embedder.embed(t))?
    } else {
        embedder.embed_batch(&texts)?
    };
    for (entry, vector) in missing.into_iter().zip(vectors) {
        if vector.dimension() != dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: dim,
                got: vector.dimension(),
            });
        }
        // A concurrent fill may have won the race with an identical vector.
        let _ = entry.embedding.set(vector);
    }
    Ok(())
}

/// Exact top-k retrieval. The scratchpad is not an entry, so it never
/// appears in the results.
pub fn top_k(
    state: &MemoryState,
    embedder: &dyn Embedder,
    query: &str,
    k: usize,
) -> Result<Vec<Hit>, RetrievalError> {
    top_k_with(state, embedder, query, k, Exec::default())
}

pub fn top_k_with(
    state: &MemoryState,
    embedder: &dyn Embedder,
    query: &str,
    k: usize,
    exec: Exec,
) -> Result<Vec<Hit>, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    if query.trim().is_empty() {
        return Err(RetrievalError::EmptyQuery);
    }
    if state.is_empty() {
        return Ok(Vec::new());
    }
    let q = embedder.embed(query)?;
    ensure_embeddings(state, embedder, exec)?;
    let entries: Vec<_> = state.entries().collect();
    let mut hits = par::map(exec, &entries, |e| Hit {
        id: e.id,
        similarity: e
            .embedding()
            .expect("embedding cache filled above")
            .cosine(&q),
    });
    if k < hits.len() {
        hits.select_nth_unstable_by(k - 1, order);
        hits.truncate(k);
    }
    rank(&mut hits);
    Ok(hits)
}

fn order(a: &Hit, b: &Hit) -> std::cmp::Ordering {
    rank_key(b.similarity)
        .cmp(&rank_key(a.similarity))
        .then(a.id.cmp(&b.id))
}

/// Sorts by descending similarity, then ascending id.
pub fn rank(hits: &mut [Hit]) {
    hits.sort_unstable_by(order);
}

fn rank_key(similarity: f64) -> i64 {
    if similarity.is_nan() {
        i64::MIN
    } else {
        (similarity * RANK_RESOLUTION).round() as i64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_embedding_is_deterministic_and_unit_norm() {
        let e = HashEmbedder::default();
        let a = e.embed("abc").unwrap();
        let b = e.embed("abc").unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert_eq!(a.dimension(), 256);
    }

    #[test]
    fn repeated_word_is_parallel() {
        // "abc" -> {abc:1}; "abc abc" -> {abc:2}; same direction.
        assert_eq!(ngrams("abc", 3), vec!["abc"]);
        assert_eq!(ngrams("abc abc", 3), vec!["abc", "abc"]);
        let e = HashEmbedder::default();
        let sim = e.embed("abc").unwrap().cosine(&e.embed("abc abc").unwrap());
        assert!((sim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ngram_split() {
        assert_eq!(ngrams("Hello, it", 3), vec!["hel", "ell", "llo", "it"]);
        assert_eq!(ngrams("?!", 3), vec!["?!"]);
    }

    #[test]
    fn empty_text_is_rejected() {
        let e = HashEmbedder::default();
        assert_eq!(e.embed(""), Err(RetrievalError::EmptyText));
        assert_eq!(e.embed("   "), Err(RetrievalError::EmptyText));
    }

    #[test]
    fn top_k_on_empty_memory() {
        let m = MemoryState::new();
        let hits = top_k(&m, &HashEmbedder::default(), "q", DEFAULT_TOP_K).unwrap();
        assert!(hits.is_empty());
    }

    #[test]
    fn top_k_argument_errors() {
        let m = MemoryState::new();
        let e = HashEmbedder::default();
        assert_eq!(top_k(&m, &e, " ", 3), Err(RetrievalError::EmptyQuery));
        assert_eq!(top_k(&m, &e, "q", 0), Err(RetrievalError::ZeroK));
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let mut m = MemoryState::new();
        for _ in 0..4 {
            m.create("same words here").unwrap();
        }
        m.create("unrelated").unwrap();
        let hits = top_k(&m, &HashEmbedder::default(), "same words", 3).unwrap();
        assert_eq!(hits.iter().map(|h| h.id).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn scratchpad_is_never_retrieved() {
        let mut m = MemoryState::new();
        m.write_scratchpad("needle needle needle");
        m.create("haystack").unwrap();
        let hits = top_k(&m, &HashEmbedder::default(), "needle", 6).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].id, 0);
    }

    #[test]
    fn lazy_fill_matches_precomputed() {
        let mut m = MemoryState::new();
        for text in ["red apple", "green pear", "red cherry", "blue sky"] {
            m.create(text).unwrap();
        }
        let e = HashEmbedder::default();
        let lazy = top_k_with(&m.clone(), &e, "red fruit", 4, Exec::Sequential).unwrap();
        ensure_embeddings(&m, &e, Exec::Parallel).unwrap();
        assert!(m.entries().all(|x| x.embedding().is_some()));
        let warm = top_k_with(&m, &e, "red fruit", 4, Exec::Parallel).unwrap();
        assert_eq!(lazy, warm);
    }

    #[test]
    fn update_invalidates_cache() {
        let mut m = MemoryState::new();
        m.create("alpha").unwrap();
        m.create("beta").unwrap();
        let e = HashEmbedder::default();
        assert_eq!(top_k(&m, &e, "alpha", 1).unwrap()[0].id, 0);
        m.update(1, "alpha alpha").unwrap();
        let hits = top_k(&m, &e, "alpha", 2).unwrap();
        assert!((hits[0].similarity - 1.0).abs() < 1e-12);
        assert!((hits[1].similarity - 1.0).abs() < 1e-12);
        assert_eq!(hits[0].id, 0);
    }

    #[test]
    fn provider_config_json() {
        let p = EmbeddingProvider::default();
        let v = serde_json::to_value(&p).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"kind": "deterministic-hash", "dimension": 256, "ngram": 3})
        );
        assert_eq!(p.build().unwrap().dimension(), 256);
    }
}
