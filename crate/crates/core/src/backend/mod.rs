//! Model backend abstraction: embeddings, text generation, passage scoring.
//!
//! A [`ModelBackend`] is object-safe so mock and HTTP implementations are
//! interchangeable anywhere in the pipeline. A [`BackendSet`] routes each
//! pipeline stage to a named backend, which is how a run can send, say,
//! summarization and final answering to different models.

mod cache;
mod http;
mod mock;

pub use cache::{cache_key, CacheKey, CacheStore, CachedBackend};
pub use http::{HttpBackend, HttpBackendConfig};
pub use mock::{fnv1a_64, MockBackend, MockScript, ScriptRule, MOCK_EMBED_DIM};

use crate::error::{Error, Result, Stage};
use crate::{Embedding, Real};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};

/// A text generation request. Decoding parameters are part of the request so
/// they participate in cache keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub temperature: Real,
    pub max_tokens: u32,
    pub n_samples: u32,
    pub stop_sequences: Vec<String>,
}

impl GenerationRequest {
    /// Defaults: temperature 0.5, 256 max tokens, a single sample, no stops.
    pub fn new(prompt: impl Into<String>) -> Self {
        GenerationRequest {
            prompt: prompt.into(),
            temperature: 0.5,
            max_tokens: 256,
            n_samples: 1,
            stop_sequences: Vec::new(),
        }
    }

    pub fn with_samples(mut self, n: u32) -> Self {
        self.n_samples = n;
        self
    }

    pub fn with_temperature(mut self, t: Real) -> Self {
        self.temperature = t;
        self
    }

    pub fn with_max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(Error::InvalidRequest("empty prompt".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::InvalidRequest("n_samples must be at least 1".into()));
        }
        if self.max_tokens == 0 {
            return Err(Error::InvalidRequest("max_tokens must be at least 1".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::InvalidRequest(format!(
                "temperature must be finite and non-negative, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    /// One completion per requested sample, in sample order.
    pub samples: Vec<String>,
    pub backend_id: String,
    /// True when served from the response cache rather than the backend.
    pub cached: bool,
    /// True when any sample stopped at the token limit.
    pub truncated: bool,
}

/// Inputs to passage re-ranking: score how well a passage answers the
/// question, with extracted keywords as the steering signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankRequest {
    pub question: String,
    pub keywords: Vec<String>,
    pub passage_text: String,
}

pub trait ModelBackend: Send + Sync {
    fn id(&self) -> &str;

    /// Embed a batch of texts. Every returned vector has the same dimension.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>>;

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult>;

    /// Relevance of a passage to a question, higher is better. Deterministic
    /// for fixed inputs.
    fn rerank_score(&self, request: &RerankRequest) -> Result<Real>;
}

/// Per-operation invocation counts for one backend, as recorded in run
/// manifests.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendCounts {
    pub embed: u64,
    pub generate: u64,
    pub rerank: u64,
}

impl BackendCounts {
    pub fn total(&self) -> u64 {
        self.embed + self.generate + self.rerank
    }
}

/// Counts every call that reaches the wrapped backend. Placed *inside* the
/// cache wrapper, so cache hits do not inflate the numbers.
pub struct CountingBackend {
    inner: Arc<dyn ModelBackend>,
    embed: AtomicU64,
    generate: AtomicU64,
    rerank: AtomicU64,
}

impl CountingBackend {
    pub fn wrap(inner: Arc<dyn ModelBackend>) -> Arc<CountingBackend> {
        Arc::new(CountingBackend {
            inner,
            embed: AtomicU64::new(0),
            generate: AtomicU64::new(0),
            rerank: AtomicU64::new(0),
        })
    }

    pub fn counts(&self) -> BackendCounts {
        BackendCounts {
            embed: self.embed.load(Ordering::Relaxed),
            generate: self.generate.load(Ordering::Relaxed),
            rerank: self.rerank.load(Ordering::Relaxed),
        }
    }
}

impl ModelBackend for CountingBackend {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        self.embed.fetch_add(1, Ordering::Relaxed);
        self.inner.embed_batch(texts)
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult> {
        self.generate.fetch_add(1, Ordering::Relaxed);
        self.inner.generate(request)
    }

    fn rerank_score(&self, request: &RerankRequest) -> Result<Real> {
        self.rerank.fetch_add(1, Ordering::Relaxed);
        self.inner.rerank_score(request)
    }
}

/// Minimal counting semaphore; std has no stable one.
struct Semaphore {
    permits: Mutex<usize>,
    available: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Semaphore {
        Semaphore {
            permits: Mutex::new(permits.max(1)),
            available: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.available.wait(permits).unwrap();
        }
        *permits -= 1;
        SemaphoreGuard { sem: self }
    }
}

struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.sem.permits.lock().unwrap() += 1;
        self.sem.available.notify_one();
    }
}

/// Caps concurrent in-flight calls to the wrapped backend.
pub struct ThrottledBackend {
    inner: Arc<dyn ModelBackend>,
    permits: Semaphore,
}

impl ThrottledBackend {
    pub fn wrap(inner: Arc<dyn ModelBackend>, parallelism: usize) -> Arc<ThrottledBackend> {
        Arc::new(ThrottledBackend {
            inner,
            permits: Semaphore::new(parallelism),
        })
    }
}

impl ModelBackend for ThrottledBackend {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        let _permit = self.permits.acquire();
        self.inner.embed_batch(texts)
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult> {
        let _permit = self.permits.acquire();
        self.inner.generate(request)
    }

    fn rerank_score(&self, request: &RerankRequest) -> Result<Real> {
        let _permit = self.permits.acquire();
        self.inner.rerank_score(request)
    }
}

fn default_parallelism() -> usize {
    4
}

fn default_api_key_env() -> String {
    "OPENAI_API_KEY".to_string()
}

fn default_timeout_s() -> u64 {
    60
}

fn default_max_retries() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    250
}

/// Declarative backend description, as it appears in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendSpec {
    Mock {
        /// Optional scripted-response file (see [`MockScript`]).
        #[serde(default, skip_serializing_if = "Option::is_none")]
        script: Option<PathBuf>,
        #[serde(default = "default_parallelism")]
        parallelism: usize,
    },
    Http {
        /// OpenAI-compatible API root, e.g. `https://api.openai.com/v1`.
        base_url: String,
        model: String,
        /// Model for the embeddings endpoint when it differs from `model`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        embedding_model: Option<String>,
        /// Environment variable the API key is read from.
        #[serde(default = "default_api_key_env")]
        api_key_env: String,
        #[serde(default = "default_parallelism")]
        parallelism: usize,
        #[serde(default = "default_timeout_s")]
        timeout_s: u64,
        #[serde(default = "default_max_retries")]
        max_retries: u32,
        #[serde(default = "default_backoff_ms")]
        backoff_ms: u64,
    },
}

impl BackendSpec {
    pub fn parallelism(&self) -> usize {
        match self {
            BackendSpec::Mock { parallelism, .. } => *parallelism,
            BackendSpec::Http { parallelism, .. } => *parallelism,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            BackendSpec::Mock { .. } => "mock",
            BackendSpec::Http { .. } => "http",
        }
    }

    /// Model name for reporting; mocks have none.
    pub fn model(&self) -> Option<&str> {
        match self {
            BackendSpec::Mock { .. } => None,
            BackendSpec::Http { model, .. } => Some(model),
        }
    }
}

/// Named backends plus a stage → backend routing table.
///
/// Routing falls back to the entry named `default`, and when the set holds a
/// single backend, that one serves every stage.
pub struct BackendSet {
    backends: BTreeMap<String, Arc<dyn ModelBackend>>,
    routing: BTreeMap<String, String>,
}

pub const DEFAULT_BACKEND_ID: &str = "default";

impl BackendSet {
    pub fn new(
        backends: BTreeMap<String, Arc<dyn ModelBackend>>,
        routing: BTreeMap<String, String>,
    ) -> Result<BackendSet> {
        if backends.is_empty() {
            return Err(Error::InvalidConfig("no backends configured".into()));
        }
        for (stage, id) in &routing {
            if Stage::parse(stage).is_none() {
                return Err(Error::InvalidConfig(format!(
                    "routing references unknown stage {stage:?}"
                )));
            }
            if !backends.contains_key(id) {
                return Err(Error::InvalidConfig(format!(
                    "routing for stage {stage} references unknown backend {id:?}"
                )));
            }
        }
        let set = BackendSet { backends, routing };
        // Every stage must resolve up front, not at first use mid-run.
        for stage in Stage::ALL {
            set.for_stage(stage)?;
        }
        Ok(set)
    }

    /// A set holding one backend that serves every stage.
    pub fn single(backend: Arc<dyn ModelBackend>) -> BackendSet {
        let mut backends: BTreeMap<String, Arc<dyn ModelBackend>> = BTreeMap::new();
        backends.insert(backend.id().to_string(), backend);
        BackendSet {
            backends,
            routing: BTreeMap::new(),
        }
    }

    pub fn for_stage(&self, stage: Stage) -> Result<&Arc<dyn ModelBackend>> {
        if let Some(id) = self.routing.get(stage.name()) {
            return Ok(&self.backends[id]);
        }
        if let Some(backend) = self.backends.get(DEFAULT_BACKEND_ID) {
            return Ok(backend);
        }
        if self.backends.len() == 1 {
            return Ok(self.backends.values().next().unwrap());
        }
        Err(Error::InvalidConfig(format!(
            "no backend routed for stage {stage} and no default backend defined"
        )))
    }

    pub fn get(&self, id: &str) -> Option<&Arc<dyn ModelBackend>> {
        self.backends.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.backends.keys().map(|s| s.as_str())
    }
}
