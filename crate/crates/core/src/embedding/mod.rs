//! Embedder abstraction: task-type conditioning, model-family prefixes,
//! a content-addressed disk cache and pluggable backends.

mod cache;
mod mock;
mod remote;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chunking::{tokenize_ws, SentenceEncoder};
use crate::error::{Error, Result};

pub use cache::{CacheEntryProblem, CacheStats, EmbeddingCache, GcReport};
pub use mock::{mock_embed, mock_bucket, MockBackend};
pub use remote::{
    EmbedRequest, EmbedResponse, HealthResponse, RateLimiter, RemoteBackend, RemoteClient,
    RetryPolicy, TOKEN_ENV_VAR,
};

/// Dense embedding with finite 32-bit components.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("embedding has zero dimensions".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "embedding component {i} is not finite"
            )));
        }
        Ok(Self { values })
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
            .map(|&v| v as f64 * v as f64)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_unit(&self, tol: f64) -> bool {
        (self.norm() - 1.0).abs() <= tol
    }

    /// Scales to unit L2 norm. Fails on the zero vector.
    pub fn normalized(&self) -> Result<Self> {
        let norm = self.norm();
        if norm == 0.0 {
            return Err(Error::UndefinedSimilarity);
        }
        Ok(Self {
            values: self.values.iter().map(|&v| (v as f64 / norm) as f32).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskType {
    RetrievalQuery,
    RetrievalDocument,
}

impl TaskType {
    /// Value of the `task` field in the wire protocol.
    pub fn wire_name(&self) -> &'static str {
        match self {
            TaskType::RetrievalQuery => "query",
            TaskType::RetrievalDocument => "document",
        }
    }

    fn native_name(&self) -> &'static str {
        match self {
            TaskType::RetrievalQuery => "RETRIEVAL_QUERY",
            TaskType::RetrievalDocument => "RETRIEVAL_DOCUMENT",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefixPolicy {
    #[default]
    None,
    /// `"query: "` / `"passage: "` text prefixes.
    E5Style,
    /// Task travels in the request; the text is untouched.
    TaskTypeNative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Remote,
}

fn default_true() -> bool {
    true
}

fn default_batch_size() -> usize {
    16
}

fn default_rate_limit() -> f64 {
    5.0
}

fn default_max_tokens() -> usize {
    512
}

fn default_timeout_secs() -> u64 {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderSpec {
    pub name: String,
    pub dim: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default)]
    pub prefix_policy: PrefixPolicy,
    #[serde(default)]
    pub backend: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_true")]
    pub normalize: bool,
    /// Texts per backend request.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Client-side request rate cap; 0 disables it.
    #[serde(default = "default_rate_limit")]
    pub rate_limit_rps: f64,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

impl EmbedderSpec {
    pub fn mock(name: &str, dim: usize) -> Self {
        Self {
            name: name.to_string(),
            dim,
            max_tokens: default_max_tokens(),
            prefix_policy: PrefixPolicy::None,
            backend: BackendKind::Mock,
            endpoint: None,
            normalize: true,
            batch_size: default_batch_size(),
            rate_limit_rps: 0.0,
            timeout_secs: default_timeout_secs(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config(format!("embedder {:?}: dim must be > 0", self.name)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be > 0".into()));
        }
        if self.backend == BackendKind::Remote && self.endpoint.is_none() {
            return Err(Error::Config(format!(
                "embedder {:?}: remote backend requires an endpoint",
                self.name
            )));
        }
        Ok(())
    }

    /// Model identity used in cache keys. Task-native models embed the same
    /// text differently per task, so the task is folded in.
    pub fn cache_model_id(&self, task: TaskType) -> String {
        match self.prefix_policy {
            PrefixPolicy::TaskTypeNative => format!("{}@{}", self.name, task.native_name()),
            _ => self.name.clone(),
        }
    }
}

pub fn prefix_for(spec: &EmbedderSpec, task: TaskType) -> &'static str {
    match (spec.prefix_policy, task) {
        (PrefixPolicy::E5Style, TaskType::RetrievalQuery) => "query: ",
        (PrefixPolicy::E5Style, TaskType::RetrievalDocument) => "passage: ",
        (PrefixPolicy::None | PrefixPolicy::TaskTypeNative, _) => "",
    }
}

/// SHA-256 digest identifying one cached embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey([u8; 32]);

impl CacheKey {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).ok()?;
        // reject uppercase so every key has exactly one file name
        (s.len() == 64 && s.bytes().all(|b| !b.is_ascii_uppercase())).then_some(Self(out))
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

const KEY_SEPARATOR: u8 = 0x1F;

/// `SHA-256(model ++ 0x1F ++ text ++ 0x1F ++ ("1" | "0"))`.
pub fn cache_key(model: &str, text: &str, normalize: bool) -> CacheKey {
    let mut h = Sha256::new();
    h.update(model.as_bytes());
    h.update([KEY_SEPARATOR]);
    h.update(text.as_bytes());
    h.update([KEY_SEPARATOR]);
    h.update(if normalize { b"1" } else { b"0" });
    CacheKey(h.finalize().into())
}

/// Something that turns texts into raw vectors. Batches are task-homogeneous.
pub trait Backend: Send + Sync {
    fn embed(&self, texts: &[String], task: TaskType) -> Result<Vec<Vec<f32>>>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn embed(&self, texts: &[String], task: TaskType) -> Result<Vec<Vec<f32>>> {
        (**self).embed(texts, task)
    }
}

/// Counters exposed by [`Embedder`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct EmbedStats {
    pub backend_calls: u64,
    pub backend_items: u64,
    pub cache_hits: u64,
    /// Inputs whose whitespace token count exceeded `max_tokens`; the
    /// backend truncates these.
    pub over_max_tokens: u64,
}

#[derive(Debug, Default)]
struct Counters {
    backend_calls: AtomicU64,
    backend_items: AtomicU64,
    cache_hits: AtomicU64,
    over_max_tokens: AtomicU64,
}

/// Cache-fronted embedder for one model.
pub struct Embedder {
    spec: EmbedderSpec,
    backend: Box<dyn Backend>,
    cache: Option<EmbeddingCache>,
    counters: Counters,
}

impl fmt::Debug for Embedder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Embedder")
            .field("spec", &self.spec)
            .field("cache", &self.cache)
            .finish_non_exhaustive()
    }
}

impl Embedder {
    pub fn new(spec: EmbedderSpec, backend: Box<dyn Backend>, cache: Option<EmbeddingCache>) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            backend,
            cache,
            counters: Counters::default(),
        })
    }

    /// Builds the backend named by the spec.
    pub fn from_spec(spec: EmbedderSpec, cache: Option<EmbeddingCache>) -> Result<Self> {
        spec.validate()?;
        let backend: Box<dyn Backend> = match spec.backend {
            BackendKind::Mock => Box::new(MockBackend::new(spec.dim)),
            BackendKind::Remote => Box::new(RemoteBackend::from_spec(&spec)?),
        };
        Self::new(spec, backend, cache)
    }

    pub fn spec(&self) -> &EmbedderSpec {
        &self.spec
    }

    pub fn cache(&self) -> Option<&EmbeddingCache> {
        self.cache.as_ref()
    }

    pub fn stats(&self) -> EmbedStats {
        EmbedStats {
            backend_calls: self.counters.backend_calls.load(Ordering::Relaxed),
            backend_items: self.counters.backend_items.load(Ordering::Relaxed),
            cache_hits: self.counters.cache_hits.load(Ordering::Relaxed),
            over_max_tokens: self.counters.over_max_tokens.load(Ordering::Relaxed),
        }
    }

    /// Embeds texts in order, consulting the cache per item first.
    ///
    /// Misses go to the backend in `batch_size` groups and each group is
    /// written to the cache as soon as it returns, so an interrupted run
    /// resumes where it stopped.
    pub fn embed_batch(&self, texts: &[String], task: TaskType) -> Result<Vec<EmbeddingVector>> {
        self.embed_inner(texts, task, true)
    }

    /// Same as [`Embedder::embed_batch`] but never reads or writes the cache.
    pub fn embed_uncached(&self, texts: &[String], task: TaskType) -> Result<Vec<EmbeddingVector>> {
        self.embed_inner(texts, task, false)
    }

    fn embed_inner(&self, texts: &[String], task: TaskType, use_cache: bool) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Err(Error::InvalidInput("embed_batch called with no texts".into()));
        }
        let prefix = prefix_for(&self.spec, task);
        let model_id = self.spec.cache_model_id(task);
        let inputs: Vec<String> = texts.iter().map(|t| format!("{prefix}{t}")).collect();
        let over = inputs
            .iter()
            .filter(|t| tokenize_ws(t).len() > self.spec.max_tokens)
            .count();
        self.counters
            .over_max_tokens
            .fetch_add(over as u64, Ordering::Relaxed);

        let cache = self.cache.as_ref().filter(|_| use_cache);
        let mut out: Vec<Option<EmbeddingVector>> = vec![None; inputs.len()];
        let mut keys = Vec::with_capacity(inputs.len());
        let mut misses = Vec::new();
        for (i, text) in inputs.iter().enumerate() {
            let key = cache_key(&model_id, text, self.spec.normalize);
            match cache.map(|c| c.get(&key)).transpose()?.flatten() {
                Some(values) => {
                    self.counters.cache_hits.fetch_add(1, Ordering::Relaxed);
                    out[i] = Some(self.check_dim(values)?);
                }
                None => misses.push(i),
            }
            keys.push(key);
        }

        // identical texts inside one call are sent once
        let mut unique: Vec<usize> = Vec::new();
        let mut first_of: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
        let mut alias: Vec<(usize, usize)> = Vec::new();
        for &i in &misses {
            match first_of.get(inputs[i].as_str()) {
                Some(&j) => alias.push((i, j)),
                None => {
                    first_of.insert(inputs[i].as_str(), i);
                    unique.push(i);
                }
            }
        }

        for group in unique.chunks(self.spec.batch_size) {
            let batch: Vec<String> = group.iter().map(|&i| inputs[i].clone()).collect();
            self.counters.backend_calls.fetch_add(1, Ordering::Relaxed);
            self.counters
                .backend_items
                .fetch_add(batch.len() as u64, Ordering::Relaxed);
            let raw = self.backend.embed(&batch, task)?;
            if raw.len() != batch.len() {
                return Err(Error::Contract(format!(
                    "backend returned {} vectors for {} texts",
                    raw.len(),
                    batch.len()
                )));
            }
            for (&i, values) in group.iter().zip(raw) {
                let mut v = self.check_dim(values)?;
                if self.spec.normalize {
                    v = v.normalized().map_err(|_| {
                        Error::Contract(format!("backend returned a zero vector for input {i}"))
                    })?;
                }
                if let Some(c) = cache {
                    c.put(&keys[i], v.values())?;
                }
                out[i] = Some(v);
            }
        }
        for (i, j) in alias {
            out[i] = out[j].clone();
        }
        Ok(out
            .into_iter()
            .map(|v| v.expect("every input resolved"))
            .collect())
    }

    fn check_dim(&self, values: Vec<f32>) -> Result<EmbeddingVector> {
        if values.len() != self.spec.dim {
            return Err(Error::Contract(format!(
                "model {:?} produced dim {} but spec declares {}",
                self.spec.name,
                values.len(),
                self.spec.dim
            )));
        }
        EmbeddingVector::new(values).map_err(|e| Error::Contract(e.to_string()))
    }
}

impl SentenceEncoder for Embedder {
    fn encode_sentences(&self, sentences: &[String]) -> Result<Vec<EmbeddingVector>> {
        self.embed_batch(sentences, TaskType::RetrievalDocument)
    }
}
