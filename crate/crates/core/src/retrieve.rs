//! Two-hop retrieval: rank table rows, then rank the passages they link to.
//!
//! Rows are linearized into sentences and scored against the question by
//! cosine similarity. Passages enter the pool only through links from the
//! retrieved rows; each is scored against a blend of the question embedding
//! and its source row's embedding, and the pooled top candidates are finally
//! re-ranked with keywords extracted from the question. Ties always break
//! toward the earlier candidate (lower row index, earlier pool position), so
//! retrieval is deterministic end to end.

use crate::backend::{BackendSet, GenerationRequest, ModelBackend, RerankRequest};
use crate::corpus::{linked_passages, Corpus, Question, Table};
use crate::error::{Error, Result, Stage};
use crate::linearize::{raw_row_text, row_to_sentence, LinearizationStyle};
use crate::reader::prompt::PromptLibrary;
use crate::text::tokenize;
use crate::vector::{combine_embeddings, top_k_indices};
use crate::{Embedding, Real};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

/// Similarity between embedded texts. Embeddings are normalized first, so the
/// dot product is cosine similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    DotOnNormalized,
}

/// Which text stands in for a row during retrieval: the linearized sentence,
/// or the bare cell values (the degraded form used by the ablation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowTextMode {
    #[default]
    Sentence,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeywordMode {
    #[default]
    Rule,
    Backend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrieverConfig {
    /// Question weight in the blended passage-query embedding.
    pub alpha: Real,
    /// Rows kept from the table.
    pub k_rows: usize,
    /// Passage candidates pooled before re-ranking.
    pub k_text: usize,
    /// Passages kept after re-ranking.
    pub k_final: usize,
    pub similarity: Similarity,
    pub row_text: RowTextMode,
    pub linearization: LinearizationStyle,
    pub keywords: KeywordMode,
    pub max_keywords: usize,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        RetrieverConfig {
            alpha: 0.2,
            k_rows: 3,
            k_text: 6,
            k_final: 3,
            similarity: Similarity::DotOnNormalized,
            row_text: RowTextMode::Sentence,
            linearization: LinearizationStyle::default(),
            keywords: KeywordMode::Rule,
            max_keywords: 8,
        }
    }
}

impl RetrieverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.k_rows == 0 || self.k_text == 0 || self.k_final == 0 {
            return Err(Error::InvalidConfig("k_rows, k_text, k_final must be positive".into()));
        }
        if self.k_final > self.k_text {
            return Err(Error::InvalidConfig(format!(
                "k_final ({}) cannot exceed k_text ({})",
                self.k_final, self.k_text
            )));
        }
        if self.max_keywords == 0 {
            return Err(Error::InvalidConfig("max_keywords must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowCandidate {
    pub table_id: String,
    pub row_index: usize,
    /// The text the row was scored as (sentence or raw, per config).
    pub sentence: String,
    pub score: Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassageCandidate {
    pub passage_id: String,
    pub score: Real,
    /// The retrieved row whose link pulled this passage in.
    pub source_row_index: usize,
}

/// Everything retrieval produced for one question, intermediates included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub question_id: String,
    pub rows: Vec<RowCandidate>,
    /// Final passages forwarded to the reader (after re-ranking).
    pub passages: Vec<PassageCandidate>,
    /// Pooled candidates before re-ranking.
    pub intermediate_passages: Vec<PassageCandidate>,
    pub keywords: Vec<String>,
}

fn row_texts(table: &Table, config: &RetrieverConfig) -> Result<Vec<String>> {
    match config.row_text {
        RowTextMode::Sentence => (0..table.rows.len())
            .map(|i| row_to_sentence(table, i, config.linearization))
            .collect(),
        RowTextMode::Raw => (0..table.rows.len())
            .map(|i| raw_row_text(table, i))
            .collect(),
    }
}

fn embed_all(
    backend: &dyn ModelBackend,
    texts: &[String],
) -> Result<Vec<Embedding>> {
    let vectors = backend
        .embed_batch(texts)
        .map_err(|e| e.at_stage(Stage::Embed))?;
    if vectors.len() != texts.len() {
        return Err(Error::Backend {
            backend_id: "embed".into(),
            stage: Some(Stage::Embed),
            status: None,
            message: format!("asked for {} embeddings, got {}", texts.len(), vectors.len()),
        });
    }
    let mut out = Vec::with_capacity(vectors.len());
    let mut dim = None;
    for v in vectors {
        if let Some(d) = dim {
            if v.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: v.dim(),
                });
            }
        } else {
            dim = Some(v.dim());
        }
        out.push(v.normalized());
    }
    Ok(out)
}

fn rows_from_scores(
    table: &Table,
    texts: &[String],
    scores: &[Real],
    k: usize,
) -> Vec<RowCandidate> {
    top_k_indices(scores, k)
        .into_iter()
        .map(|i| RowCandidate {
            table_id: table.id.clone(),
            row_index: i,
            sentence: texts[i].clone(),
            score: scores[i],
        })
        .collect()
}

/// Embed the question and every row, and keep the `k_rows` best rows.
/// Returns the question embedding alongside so later stages reuse it.
fn retrieve_rows_impl(
    backend: &dyn ModelBackend,
    question: &str,
    table: &Table,
    config: &RetrieverConfig,
) -> Result<(Embedding, Vec<RowCandidate>)> {
    let texts = row_texts(table, config)?;
    let mut batch = Vec::with_capacity(texts.len() + 1);
    batch.push(question.to_string());
    batch.extend(texts.iter().cloned());
    let vectors = embed_all(backend, &batch)?;
    let question_vec = vectors[0].clone();
    let scores: Vec<Real> = vectors[1..]
        .iter()
        .map(|row_vec| question_vec.dot(row_vec))
        .collect::<Result<_>>()?;
    let rows = rows_from_scores(table, &texts, &scores, config.k_rows);
    Ok((question_vec, rows))
}

/// Top rows of the question's table by similarity between the question and
/// each row's text. An empty table yields an empty list; tables with fewer
/// than `k_rows` rows yield them all.
pub fn retrieve_rows(
    backend: &dyn ModelBackend,
    question: &str,
    table: &Table,
    config: &RetrieverConfig,
) -> Result<Vec<RowCandidate>> {
    if table.rows.is_empty() {
        return Ok(Vec::new());
    }
    let (_question_vec, rows) = retrieve_rows_impl(backend, question, table, config)?;
    Ok(rows)
}

/// Pool the passages linked from the retrieved rows and keep the best
/// `k_text`, scoring each against a blend of the question and its source row.
/// A passage linked from several rows is kept once, under its best source.
pub fn retrieve_passages(
    backend: &dyn ModelBackend,
    question_vec: &Embedding,
    rows: &[RowCandidate],
    corpus: &Corpus,
    config: &RetrieverConfig,
) -> Result<Vec<PassageCandidate>> {
    // Pool entries in prior order: row rank, then link order within the row.
    struct PoolEntry {
        passage_id: String,
        row_rank: usize,
        source_row_index: usize,
    }
    let mut pool = Vec::new();
    let mut passage_texts: BTreeMap<String, String> = BTreeMap::new();
    for (rank, row) in rows.iter().enumerate() {
        for passage in linked_passages(corpus, &row.table_id, row.row_index)? {
            pool.push(PoolEntry {
                passage_id: passage.id.clone(),
                row_rank: rank,
                source_row_index: row.row_index,
            });
            passage_texts
                .entry(passage.id.clone())
                .or_insert_with(|| passage.text.clone());
        }
    }
    if pool.is_empty() {
        return Ok(Vec::new());
    }

    // One batch: every row sentence, then every distinct passage text.
    let passage_ids: Vec<&String> = passage_texts.keys().collect();
    let mut batch: Vec<String> = rows.iter().map(|r| r.sentence.clone()).collect();
    batch.extend(passage_texts.values().cloned());
    let vectors = embed_all(backend, &batch)?;
    let (row_vecs, passage_vecs) = vectors.split_at(rows.len());

    let blended: Vec<Embedding> = row_vecs
        .iter()
        .map(|row_vec| combine_embeddings(question_vec, row_vec, config.alpha))
        .collect::<Result<_>>()?;
    let passage_vec_by_id: BTreeMap<&str, &Embedding> = passage_ids
        .iter()
        .zip(passage_vecs)
        .map(|(id, v)| (id.as_str(), v))
        .collect();

    // Score the pool, then dedup by passage id keeping the best-scoring
    // source row (earlier rank on ties).
    let mut best: BTreeMap<&str, (usize, Real, usize)> = BTreeMap::new(); // id → (pool idx, score, rank)
    let mut scored = Vec::with_capacity(pool.len());
    for (idx, entry) in pool.iter().enumerate() {
        let score = blended[entry.row_rank].dot(passage_vec_by_id[entry.passage_id.as_str()])?;
        scored.push(score);
        match best.get(entry.passage_id.as_str()) {
            Some(&(_, s, _)) if s >= score => {}
            _ => {
                best.insert(entry.passage_id.as_str(), (idx, score, entry.row_rank));
            }
        }
    }
    let mut kept: Vec<usize> = best.values().map(|&(idx, _, _)| idx).collect();
    kept.sort_unstable(); // restore pool order among the kept entries
    let kept_scores: Vec<Real> = kept.iter().map(|&i| scored[i]).collect();
    Ok(top_k_indices(&kept_scores, config.k_text)
        .into_iter()
        .map(|j| {
            let idx = kept[j];
            PassageCandidate {
                passage_id: pool[idx].passage_id.clone(),
                score: scored[idx],
                source_row_index: pool[idx].source_row_index,
            }
        })
        .collect())
}

fn stopwords() -> &'static BTreeSet<&'static str> {
    static WORDS: OnceLock<BTreeSet<&'static str>> = OnceLock::new();
    WORDS.get_or_init(|| {
        include_str!("../assets/stopwords.txt")
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect()
    })
}

/// Content keywords of a question. Rule mode drops stopwords and keeps the
/// first occurrence of each remaining token, in question order; backend mode
/// asks a model and parses a comma-separated reply. Both cap the count.
pub fn extract_keywords(
    backend: Option<&dyn ModelBackend>,
    templates: &PromptLibrary,
    question: &str,
    config: &RetrieverConfig,
) -> Result<Vec<String>> {
    let keywords = match config.keywords {
        KeywordMode::Rule => {
            let mut seen = BTreeSet::new();
            tokenize(question)
                .into_iter()
                .filter(|t| !stopwords().contains(t.as_str()))
                .filter(|t| seen.insert(t.clone()))
                .collect::<Vec<_>>()
        }
        KeywordMode::Backend => {
            let backend = backend.ok_or_else(|| {
                Error::InvalidConfig("keyword extraction is routed to a backend but none was given".into())
            })?;
            let prompt = templates.render(
                "keywords",
                &[("question", question.to_string())].into_iter().collect(),
            )?;
            let request = GenerationRequest::new(prompt)
                .with_temperature(0.0)
                .with_max_tokens(64);
            let result = backend
                .generate(&request)
                .map_err(|e| e.at_stage(Stage::Keywords))?;
            let mut seen = BTreeSet::new();
            result.samples[0]
                .split(|c| c == ',' || c == '\n')
                .map(|s| s.trim().to_lowercase())
                .filter(|s| !s.is_empty())
                .filter(|s| seen.insert(s.clone()))
                .collect()
        }
    };
    Ok(keywords.into_iter().take(config.max_keywords).collect())
}

/// Re-score pooled candidates with the rerank backend and keep the best
/// `k_final`. Ties preserve the incoming order.
pub fn rerank_passages(
    backend: &dyn ModelBackend,
    question: &str,
    keywords: &[String],
    candidates: &[PassageCandidate],
    corpus: &Corpus,
    k_final: usize,
) -> Result<Vec<PassageCandidate>> {
    let mut rescored = Vec::with_capacity(candidates.len());
    for candidate in candidates {
        let text = match corpus.passage(&candidate.passage_id) {
            Some(p) => p.text.clone(),
            None => {
                log::warn!("rerank: passage {} vanished from corpus", candidate.passage_id);
                String::new()
            }
        };
        let score = backend
            .rerank_score(&RerankRequest {
                question: question.to_string(),
                keywords: keywords.to_vec(),
                passage_text: text,
            })
            .map_err(|e| e.at_stage(Stage::Rerank))?;
        rescored.push(PassageCandidate {
            passage_id: candidate.passage_id.clone(),
            score,
            source_row_index: candidate.source_row_index,
        });
    }
    let scores: Vec<Real> = rescored.iter().map(|c| c.score).collect();
    Ok(top_k_indices(&scores, k_final)
        .into_iter()
        .map(|i| rescored[i].clone())
        .collect())
}

/// Full retrieval for one question: rows, pooled passages, keywords, final
/// re-ranked passages. Stage routing decides which backend serves embedding,
/// keyword extraction, and re-ranking.
pub fn retrieve(
    backends: &BackendSet,
    templates: &PromptLibrary,
    question: &Question,
    corpus: &Corpus,
    config: &RetrieverConfig,
) -> Result<RetrievalResult> {
    config.validate()?;
    let table = corpus.table(&question.table_id)?;
    let empty = RetrievalResult {
        question_id: question.id.clone(),
        rows: Vec::new(),
        passages: Vec::new(),
        intermediate_passages: Vec::new(),
        keywords: Vec::new(),
    };
    if table.rows.is_empty() {
        return Ok(empty);
    }

    let embed_backend = backends.for_stage(Stage::Embed)?;
    let (question_vec, rows) =
        retrieve_rows_impl(embed_backend.as_ref(), &question.text, table, config)?;
    let intermediate =
        retrieve_passages(embed_backend.as_ref(), &question_vec, &rows, corpus, config)?;

    let keyword_backend = match config.keywords {
        KeywordMode::Rule => None,
        KeywordMode::Backend => Some(backends.for_stage(Stage::Keywords)?.as_ref()),
    };
    let keywords = extract_keywords(keyword_backend, templates, &question.text, config)?;

    let rerank_backend = backends.for_stage(Stage::Rerank)?;
    let passages = rerank_passages(
        rerank_backend.as_ref(),
        &question.text,
        &keywords,
        &intermediate,
        corpus,
        config.k_final,
    )?;

    Ok(RetrievalResult {
        question_id: question.id.clone(),
        rows,
        passages,
        intermediate_passages: intermediate,
        keywords,
    })
}
