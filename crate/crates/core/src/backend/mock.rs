//! Deterministic in-process backend for tests and offline runs.
//!
//! Embeddings are hashed bags of tokens: each token adds 1.0 at index
//! `fnv1a_64(token) % 256`, and the result is L2-normalized. Two texts with
//! the same token multiset therefore embed identically, and texts sharing no
//! hashed index are orthogonal. Generation replays scripted responses matched
//! by substring; re-ranking scores lexical keyword overlap.

use super::{GenerationRequest, GenerationResult, ModelBackend, RerankRequest};
use crate::error::{Error, Result};
use crate::text::tokenize;
use crate::{Embedding, Real};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

/// Embedding dimension of the mock backend.
pub const MOCK_EMBED_DIM: usize = 256;

const FNV_OFFSET_BASIS: u64 = 14695981039346656037;
const FNV_PRIME: u64 = 1099511628211;

/// 64-bit FNV-1a over raw bytes.
pub fn fnv1a_64(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET_BASIS;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// One scripted generation rule: fires when every `contains` fragment occurs
/// in the prompt. Earlier rules win.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub contains: Vec<String>,
    /// Samples are drawn from this list, cycling when more are requested than
    /// provided.
    #[serde(default)]
    pub responses: Vec<String>,
    /// Simulate a backend failure instead of responding.
    #[serde(default)]
    pub fail: bool,
    /// Mark the response as cut off at the token limit.
    #[serde(default)]
    pub truncated: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    /// Response when no rule matches; without it, unmatched prompts error so
    /// fixture gaps surface loudly.
    #[serde(default)]
    pub default: Option<String>,
}

impl MockScript {
    pub fn load(path: impl AsRef<Path>) -> Result<MockScript> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| {
            Error::InvalidConfig(format!("cannot read mock script {}: {e}", path.display()))
        })?;
        serde_json::from_slice(&bytes).map_err(|e| {
            Error::InvalidConfig(format!("invalid mock script {}: {e}", path.display()))
        })
    }
}

pub struct MockBackend {
    id: String,
    script: MockScript,
}

impl MockBackend {
    pub fn new(id: impl Into<String>) -> MockBackend {
        MockBackend {
            id: id.into(),
            script: MockScript::default(),
        }
    }

    pub fn with_default(id: impl Into<String>, default_response: impl Into<String>) -> MockBackend {
        MockBackend {
            id: id.into(),
            script: MockScript {
                rules: Vec::new(),
                default: Some(default_response.into()),
            },
        }
    }

    pub fn scripted(id: impl Into<String>, script: MockScript) -> MockBackend {
        MockBackend {
            id: id.into(),
            script,
        }
    }

    pub fn from_script_file(id: impl Into<String>, path: impl AsRef<Path>) -> Result<MockBackend> {
        Ok(MockBackend::scripted(id, MockScript::load(path)?))
    }

    fn backend_error(&self, message: impl Into<String>) -> Error {
        Error::Backend {
            backend_id: self.id.clone(),
            stage: None,
            status: None,
            message: message.into(),
        }
    }

    /// Hashed-bag embedding of one text. Zero tokens embed to the zero vector.
    fn embed_one(&self, text: &str) -> Embedding {
        let mut values = vec![0.0 as Real; MOCK_EMBED_DIM];
        for token in tokenize(text) {
            let idx = (fnv1a_64(token.as_bytes()) % MOCK_EMBED_DIM as u64) as usize;
            values[idx] += 1.0;
        }
        Embedding::new(values).expect("bag embedding is finite").normalized()
    }
}

impl ModelBackend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult> {
        request.validate()?;
        let n = request.n_samples as usize;
        let rule = self
            .script
            .rules
            .iter()
            .find(|rule| rule.contains.iter().all(|frag| request.prompt.contains(frag)));
        let (samples, truncated) = match rule {
            Some(rule) if rule.fail => {
                return Err(self.backend_error("scripted failure"));
            }
            Some(rule) => {
                if rule.responses.is_empty() {
                    return Err(self.backend_error(format!(
                        "scripted rule {:?} has no responses",
                        rule.contains
                    )));
                }
                let samples = (0..n)
                    .map(|i| rule.responses[i % rule.responses.len()].clone())
                    .collect();
                (samples, rule.truncated)
            }
            None => match &self.script.default {
                Some(default) => (vec![default.clone(); n], false),
                None => {
                    let head: String = request.prompt.chars().take(120).collect();
                    return Err(self.backend_error(format!(
                        "no scripted response matches prompt starting {head:?}"
                    )));
                }
            },
        };
        Ok(GenerationResult {
            samples,
            backend_id: self.id.clone(),
            cached: false,
            truncated,
        })
    }

    fn rerank_score(&self, request: &RerankRequest) -> Result<Real> {
        let passage_tokens: BTreeSet<String> =
            tokenize(&request.passage_text).into_iter().collect();
        if !request.keywords.is_empty() {
            // Fraction of keywords whose tokens all occur in the passage.
            let matched = request
                .keywords
                .iter()
                .filter(|kw| {
                    let toks = tokenize(kw);
                    !toks.is_empty() && toks.iter().all(|t| passage_tokens.contains(t))
                })
                .count();
            return Ok(matched as Real / request.keywords.len() as Real);
        }
        // No keywords: fall back to question-token overlap.
        let question_tokens: BTreeSet<String> = tokenize(&request.question).into_iter().collect();
        if question_tokens.is_empty() {
            return Ok(0.0);
        }
        let overlap = question_tokens.intersection(&passage_tokens).count();
        Ok(overlap as Real / question_tokens.len() as Real)
    }
}
