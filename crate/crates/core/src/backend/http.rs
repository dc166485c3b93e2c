//! OpenAI-compatible HTTP backend.
//!
//! Talks to `{base_url}/chat/completions` and `{base_url}/embeddings`.
//! Transport failures and 5xx responses are retried with exponential backoff;
//! 4xx responses fail immediately. Re-ranking has no dedicated endpoint in
//! this API family, so it is served by a scoring prompt against the chat
//! endpoint whose reply is parsed as a number in [0, 1].

use super::{GenerationRequest, GenerationResult, ModelBackend, RerankRequest};
use crate::error::{Error, Result};
use crate::{Embedding, Real};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::time::Duration;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    /// API root, e.g. `https://api.openai.com/v1`.
    pub base_url: String,
    pub model: String,
    /// Embeddings model when it differs from `model`.
    pub embedding_model: Option<String>,
    /// Environment variable holding the API key. Missing keys are tolerated
    /// (local servers often need none) but warned about.
    pub api_key_env: String,
    pub timeout_s: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        HttpBackendConfig {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o-mini".into(),
            embedding_model: None,
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_s: 60,
            max_retries: 3,
            backoff_ms: 250,
        }
    }
}

pub struct HttpBackend {
    id: String,
    config: HttpBackendConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(id: impl Into<String>, config: HttpBackendConfig) -> Result<HttpBackend> {
        let id = id.into();
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        if api_key.is_none() {
            log::warn!(
                "backend {id}: no API key in ${}; sending unauthenticated requests",
                config.api_key_env
            );
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_s))
            .build()
            .map_err(|e| Error::InvalidConfig(format!("http client: {e}")))?;
        Ok(HttpBackend {
            id,
            config,
            api_key,
            client,
        })
    }

    fn error(&self, status: Option<u16>, message: impl Into<String>) -> Error {
        Error::Backend {
            backend_id: self.id.clone(),
            stage: None,
            status,
            message: message.into(),
        }
    }

    /// POST with retries. Retryable: transport errors and 5xx. A 4xx or a
    /// malformed success body fails immediately.
    fn post(&self, path: &str, body: &serde_json::Value) -> Result<serde_json::Value> {
        let url = format!("{}/{}", self.config.base_url.trim_end_matches('/'), path);
        let attempts = self.config.max_retries.max(1);
        let mut last_error = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.config.backoff_ms.saturating_mul(1 << (attempt - 1));
                std::thread::sleep(Duration::from_millis(delay));
            }
            let mut request = self.client.post(&url).json(body);
            if let Some(key) = &self.api_key {
                request = request.bearer_auth(key);
            }
            match request.send() {
                Ok(response) => {
                    let status = response.status();
                    let code = status.as_u16();
                    if status.is_success() {
                        return response
                            .json::<serde_json::Value>()
                            .map_err(|e| self.error(Some(code), format!("invalid JSON body: {e}")));
                    }
                    let body_head: String = response
                        .text()
                        .unwrap_or_default()
                        .chars()
                        .take(300)
                        .collect();
                    let err = self.error(Some(code), body_head);
                    if status.is_server_error() {
                        log::warn!("{url}: attempt {} failed: {err}", attempt + 1);
                        last_error = Some(err);
                    } else {
                        return Err(err);
                    }
                }
                Err(e) => {
                    let err = self.error(None, format!("transport: {e}"));
                    log::warn!("{url}: attempt {} failed: {err}", attempt + 1);
                    last_error = Some(err);
                }
            }
        }
        Err(last_error.unwrap_or_else(|| self.error(None, "no attempts made")))
    }

    fn chat(&self, prompt: &str, request: &GenerationRequest) -> Result<serde_json::Value> {
        let mut body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "n": request.n_samples,
        });
        if !request.stop_sequences.is_empty() {
            body["stop"] = json!(request.stop_sequences);
        }
        self.post("chat/completions", &body)
    }
}

/// First number found in `text`, if any.
fn parse_leading_number(text: &str) -> Option<Real> {
    let mut start = None;
    for (i, ch) in text.char_indices() {
        let numeric = ch.is_ascii_digit() || ch == '.' || ch == '-';
        match (start, numeric) {
            (None, true) => start = Some(i),
            (Some(s), false) => {
                if let Ok(v) = text[s..i].parse::<Real>() {
                    return Some(v);
                }
                start = None;
            }
            _ => {}
        }
    }
    start.and_then(|s| text[s..].trim().parse::<Real>().ok())
}

impl ModelBackend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let model = self
            .config
            .embedding_model
            .as_deref()
            .unwrap_or(&self.config.model);
        let body = json!({ "model": model, "input": texts });
        let value = self.post("embeddings", &body)?;
        let data = value
            .get("data")
            .and_then(|d| d.as_array())
            .ok_or_else(|| self.error(None, "embeddings response has no data array"))?;
        if data.len() != texts.len() {
            return Err(self.error(
                None,
                format!("asked for {} embeddings, got {}", texts.len(), data.len()),
            ));
        }
        let mut rows: Vec<(usize, Embedding)> = Vec::with_capacity(data.len());
        for item in data {
            let index = item.get("index").and_then(|i| i.as_u64()).unwrap_or(rows.len() as u64);
            let values: Vec<Real> = item
                .get("embedding")
                .and_then(|e| serde_json::from_value(e.clone()).ok())
                .ok_or_else(|| self.error(None, "embeddings response item has no embedding"))?;
            rows.push((index as usize, Embedding::new(values)?));
        }
        rows.sort_by_key(|(i, _)| *i);
        let dim = rows[0].1.dim();
        for (_, v) in &rows {
            if v.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: v.dim(),
                });
            }
        }
        Ok(rows.into_iter().map(|(_, v)| v).collect())
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult> {
        request.validate()?;
        let value = self.chat(&request.prompt, request)?;
        let choices = value
            .get("choices")
            .and_then(|c| c.as_array())
            .ok_or_else(|| self.error(None, "chat response has no choices"))?;
        if choices.is_empty() {
            return Err(self.error(None, "chat response has zero choices"));
        }
        let mut samples = Vec::with_capacity(choices.len());
        let mut truncated = false;
        for choice in choices {
            let content = choice
                .pointer("/message/content")
                .and_then(|c| c.as_str())
                .ok_or_else(|| self.error(None, "chat choice has no message content"))?;
            samples.push(content.to_string());
            truncated |= choice
                .get("finish_reason")
                .and_then(|f| f.as_str())
                .is_some_and(|f| f == "length");
        }
        Ok(GenerationResult {
            samples,
            backend_id: self.id.clone(),
            cached: false,
            truncated,
        })
    }

    fn rerank_score(&self, request: &RerankRequest) -> Result<Real> {
        let prompt = format!(
            "Rate how relevant the passage is to the question on a scale from 0 to 1, \
             where 1 means the passage answers the question. Reply with only the number.\n\n\
             Question: {}\nKeywords: {}\nPassage: {}\nScore:",
            request.question,
            request.keywords.join(", "),
            request.passage_text
        );
        let scoring = GenerationRequest {
            prompt,
            temperature: 0.0,
            max_tokens: 8,
            n_samples: 1,
            stop_sequences: Vec::new(),
        };
        let result = self.generate(&scoring)?;
        let reply = &result.samples[0];
        match parse_leading_number(reply) {
            Some(v) => Ok(v.clamp(0.0, 1.0)),
            None => {
                log::warn!(
                    "backend {}: unparsable rerank score {reply:?}; treating as 0",
                    self.id
                );
                Ok(0.0)
            }
        }
    }
}
