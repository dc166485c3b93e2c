//! Adapters from raw dataset dumps to the canonical corpus files.
//!
//! The engine only ever reads the canonical JSONL layout; these converters
//! exist so a directory in the upstream datasets' shape can be turned into
//! it once, up front. A raw directory holds three JSON documents:
//!
//! - `tables.json`: map of table id → `{title, section_title, header: [..],
//!   data: [[cell, ..], ..]}` where a cell is either a bare string or a
//!   `[text, [passage_id, ..]]` pair.
//! - `passages.json`: map of passage id → text, or id → `{title, text}`.
//! - `questions.json`: array of `{question_id, question, answer-text,
//!   table_id, split?}`.
//!
//! Links to unknown passages are dropped and reported, matching the loader's
//! behavior, so the files written here reload without warnings.

use crate::corpus::{
    validate_corpus, write_canonical, Cell, Corpus, DanglingLink, Passage, Question, Split, Table,
};
use crate::error::{Error, Result};
use serde::Deserialize;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RawFormat {
    /// Splits come from the question records (missing ones take the default).
    Hybridqa,
    /// Every question is forced onto the dev split.
    OttqaDev,
}

impl RawFormat {
    pub fn parse(s: &str) -> Result<RawFormat> {
        match s {
            "hybridqa" => Ok(RawFormat::Hybridqa),
            "ottqa-dev" => Ok(RawFormat::OttqaDev),
            other => Err(Error::InvalidConfig(format!(
                "unknown source format {other:?} (expected hybridqa or ottqa-dev)"
            ))),
        }
    }
}

/// What a conversion did: record counts and the links it had to drop.
#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub tables: usize,
    pub passages: usize,
    pub questions: usize,
    pub dropped_links: Vec<DanglingLink>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawCell {
    Linked(String, Vec<String>),
    Plain(String),
}

#[derive(Deserialize)]
struct RawTable {
    #[serde(default)]
    title: String,
    #[serde(default)]
    section_title: String,
    header: Vec<String>,
    #[serde(default)]
    data: Vec<Vec<RawCell>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawPassage {
    Titled {
        #[serde(default)]
        title: String,
        text: String,
    },
    Text(String),
}

#[derive(Deserialize)]
struct RawQuestion {
    #[serde(alias = "id")]
    question_id: String,
    #[serde(alias = "text")]
    question: String,
    #[serde(rename = "answer-text", alias = "answer_text", default)]
    answer_text: String,
    table_id: String,
    #[serde(default)]
    split: Option<Split>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| {
        Error::InvalidConfig(format!("cannot read raw input {}: {e}", path.display()))
    })?;
    serde_json::from_slice(&bytes).map_err(|e| Error::MalformedRecord {
        path: path.display().to_string(),
        record: 0,
        reason: e.to_string(),
    })
}

/// Remove links to passages the corpus does not have, returning what was
/// dropped.
fn scrub_dangling(corpus: &mut Corpus) -> Vec<DanglingLink> {
    let known: BTreeSet<String> = corpus.passages.keys().cloned().collect();
    let mut dropped = Vec::new();
    for table in corpus.tables.values_mut() {
        for (r, row) in table.rows.iter_mut().enumerate() {
            for (c, cell) in row.iter_mut().enumerate() {
                cell.link_ids.retain(|link| {
                    let ok = known.contains(link);
                    if !ok {
                        dropped.push(DanglingLink {
                            table_id: table.id.clone(),
                            row_index: r,
                            column_index: c,
                            link_id: link.clone(),
                        });
                    }
                    ok
                });
            }
        }
    }
    dropped
}

/// Convert a raw dump directory to an in-memory corpus.
pub fn convert_raw(
    format: RawFormat,
    input_dir: impl AsRef<Path>,
    name: &str,
    default_split: Split,
) -> Result<(Corpus, IngestReport)> {
    let dir = input_dir.as_ref();
    let tables_path = dir.join("tables.json");
    let passages_path = dir.join("passages.json");
    let questions_path = dir.join("questions.json");
    for path in [&tables_path, &passages_path, &questions_path] {
        if !path.exists() {
            return Err(Error::InvalidConfig(format!(
                "raw input file {} is missing",
                path.display()
            )));
        }
    }

    let raw_tables: BTreeMap<String, RawTable> = read_json(&tables_path)?;
    let raw_passages: BTreeMap<String, RawPassage> = read_json(&passages_path)?;
    let raw_questions: Vec<RawQuestion> = read_json(&questions_path)?;

    let mut report = IngestReport {
        tables: raw_tables.len(),
        passages: raw_passages.len(),
        questions: raw_questions.len(),
        dropped_links: Vec::new(),
    };

    let passages: BTreeMap<String, Passage> = raw_passages
        .into_iter()
        .map(|(id, raw)| {
            let (title, text) = match raw {
                RawPassage::Titled { title, text } => (title, text),
                RawPassage::Text(text) => (String::new(), text),
            };
            (id.clone(), Passage { id, title, text })
        })
        .collect();

    let tables: BTreeMap<String, Table> = raw_tables
        .into_iter()
        .map(|(id, raw)| {
            let rows = raw
                .data
                .into_iter()
                .map(|row| {
                    row.into_iter()
                        .map(|cell| match cell {
                            RawCell::Plain(text) => Cell::text(text),
                            RawCell::Linked(text, links) => Cell {
                                text,
                                link_ids: links,
                            },
                        })
                        .collect()
                })
                .collect();
            let table = Table {
                id: id.clone(),
                page_title: raw.title,
                section_title: raw.section_title,
                headers: raw.header,
                rows,
            };
            (id, table)
        })
        .collect();

    let questions = raw_questions
        .into_iter()
        .map(|raw| Question {
            id: raw.question_id,
            text: raw.question,
            gold_answer: raw.answer_text,
            table_id: raw.table_id,
            split: match format {
                RawFormat::OttqaDev => Split::Dev,
                RawFormat::Hybridqa => raw.split.unwrap_or(default_split),
            },
        })
        .collect();

    let mut corpus = Corpus {
        name: name.to_string(),
        tables,
        passages,
        questions,
    };
    report.dropped_links = scrub_dangling(&mut corpus);
    if !report.dropped_links.is_empty() {
        log::warn!(
            "{}: dropped {} dangling passage link(s) during ingest",
            dir.display(),
            report.dropped_links.len()
        );
    }

    // Everything else the canonical loader would reject must be rejected
    // here too, before the broken files land on disk.
    let violations = validate_corpus(&corpus);
    if let Some(v) = violations.first() {
        return Err(Error::MalformedRecord {
            path: dir.display().to_string(),
            record: 0,
            reason: format!("{v} ({} violation(s) total)", violations.len()),
        });
    }
    Ok((corpus, report))
}

/// Convert a raw dump and write the canonical files into `out_dir`.
pub fn ingest_to_dir(
    format: RawFormat,
    input_dir: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    name: &str,
    default_split: Split,
) -> Result<IngestReport> {
    let (corpus, report) = convert_raw(format, input_dir, name, default_split)?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    write_canonical(&corpus, out_dir)?;
    Ok(report)
}
