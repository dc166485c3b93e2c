//! Content-addressed response cache.
//!
//! Keys are SHA-256 digests over the backend id, the operation, and the full
//! request payload — decoding parameters included, so changing e.g. the
//! temperature changes the key. The store is append-only: entries are written
//! once via a temp file + atomic rename, and are only ever removed when a read
//! finds them corrupt (checksum or shape mismatch), in which case the call
//! falls through to the live backend.

use super::{GenerationRequest, GenerationResult, ModelBackend, RerankRequest};
use crate::error::{Error, Result};
use crate::{Embedding, Real};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheKey {
    pub backend_id: String,
    pub operation: &'static str,
    pub digest_hex: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Cache key for a request payload. The payload must serialize
/// deterministically (serde structs do, field order is fixed).
pub fn cache_key<P: Serialize>(backend_id: &str, operation: &'static str, payload: &P) -> CacheKey {
    let mut hasher = Sha256::new();
    hasher.update(backend_id.as_bytes());
    hasher.update([0u8]);
    hasher.update(operation.as_bytes());
    hasher.update([0u8]);
    hasher.update(serde_json::to_vec(payload).expect("request payloads serialize"));
    CacheKey {
        backend_id: backend_id.to_string(),
        operation,
        digest_hex: hex(&hasher.finalize()),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    backend_id: String,
    operation: String,
    key: String,
    /// SHA-256 over the serialized `response` value.
    checksum: String,
    response: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct CacheStore {
    dir: PathBuf,
}

impl CacheStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<CacheStore> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        Ok(CacheStore { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(format!("{}.json", key.digest_hex))
    }

    /// Look up a response. Corrupt entries are evicted and reported as a miss.
    pub fn get<T: DeserializeOwned>(&self, key: &CacheKey) -> Option<T> {
        let path = self.path_for(key);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(_) => return None,
        };
        match self.decode(key, &bytes) {
            Ok(value) => Some(value),
            Err(err) => {
                log::warn!("evicting corrupt cache entry {}: {err}", path.display());
                let _ = std::fs::remove_file(&path);
                None
            }
        }
    }

    fn decode<T: DeserializeOwned>(&self, key: &CacheKey, bytes: &[u8]) -> Result<T> {
        let corrupt = |reason: String| Error::CacheCorrupt {
            key: key.digest_hex.clone(),
            reason,
        };
        let record: CacheRecord =
            serde_json::from_slice(bytes).map_err(|e| corrupt(format!("unreadable: {e}")))?;
        if record.key != key.digest_hex {
            return Err(corrupt("stored under a different key".into()));
        }
        let response_bytes =
            serde_json::to_vec(&record.response).map_err(|e| corrupt(e.to_string()))?;
        let checksum = hex(&Sha256::digest(&response_bytes));
        if checksum != record.checksum {
            return Err(corrupt("checksum mismatch".into()));
        }
        serde_json::from_value(record.response)
            .map_err(|e| corrupt(format!("wrong response shape: {e}")))
    }

    /// Insert a response. Written to a temp file in the same directory and
    /// renamed into place, so concurrent readers never observe a partial
    /// entry; concurrent writers of the same key write identical content.
    pub fn put<T: Serialize>(&self, key: &CacheKey, response: &T) -> Result<()> {
        let response = serde_json::to_value(response)?;
        let response_bytes = serde_json::to_vec(&response)?;
        let record = CacheRecord {
            backend_id: key.backend_id.clone(),
            operation: key.operation.to_string(),
            key: key.digest_hex.clone(),
            checksum: hex(&Sha256::digest(&response_bytes)),
            response,
        };
        let final_path = self.path_for(key);
        let tmp_path = self.dir.join(format!(
            ".{}.tmp-{}-{:x}",
            key.digest_hex,
            std::process::id(),
            NEXT_TMP.fetch_add(1, Ordering::Relaxed)
        ));
        std::fs::write(&tmp_path, serde_json::to_vec(&record)?)?;
        std::fs::rename(&tmp_path, &final_path)?;
        Ok(())
    }
}

static NEXT_TMP: AtomicU64 = AtomicU64::new(0);

/// Wraps a backend with read-through caching of all three operations.
pub struct CachedBackend {
    inner: Arc<dyn ModelBackend>,
    store: CacheStore,
}

impl CachedBackend {
    pub fn wrap(inner: Arc<dyn ModelBackend>, store: CacheStore) -> Arc<CachedBackend> {
        Arc::new(CachedBackend { inner, store })
    }
}

#[derive(Serialize)]
struct EmbedPayload<'a> {
    texts: &'a [String],
}

impl ModelBackend for CachedBackend {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        let key = cache_key(self.inner.id(), "embed", &EmbedPayload { texts });
        if let Some(values) = self.store.get::<Vec<Vec<Real>>>(&key) {
            return values.into_iter().map(Embedding::new).collect();
        }
        let vectors = self.inner.embed_batch(texts)?;
        let raw: Vec<&[Real]> = vectors.iter().map(|v| v.values()).collect();
        self.store.put(&key, &raw)?;
        Ok(vectors)
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult> {
        let key = cache_key(self.inner.id(), "generate", request);
        if let Some(mut result) = self.store.get::<GenerationResult>(&key) {
            result.cached = true;
            return Ok(result);
        }
        let result = self.inner.generate(request)?;
        self.store.put(&key, &result)?;
        Ok(result)
    }

    fn rerank_score(&self, request: &RerankRequest) -> Result<Real> {
        let key = cache_key(self.inner.id(), "rerank", request);
        if let Some(score) = self.store.get::<Real>(&key) {
            return Ok(score);
        }
        let score = self.inner.rerank_score(request)?;
        self.store.put(&key, &score)?;
        Ok(score)
    }
}
