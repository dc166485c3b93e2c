//! Canonical corpus model and its on-disk JSON-lines format.
//!
//! A corpus is three files — `tables.jsonl`, `passages.jsonl`,
//! `questions.jsonl` — one JSON object per line, UTF-8, unknown fields
//! ignored. Table cells may link to passages by id; links that do not resolve
//! are dropped at load time and reported, never silently kept.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// One table cell: display text plus ids of passages it links to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    #[serde(default)]
    pub text: String,
    #[serde(rename = "links", default, skip_serializing_if = "Vec::is_empty")]
    pub link_ids: Vec<String>,
}

impl Cell {
    pub fn text(text: impl Into<String>) -> Cell {
        Cell {
            text: text.into(),
            link_ids: Vec::new(),
        }
    }

    pub fn linked(text: impl Into<String>, links: &[&str]) -> Cell {
        Cell {
            text: text.into(),
            link_ids: links.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub id: String,
    #[serde(default)]
    pub page_title: String,
    #[serde(default)]
    pub section_title: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub gold_answer: String,
    pub table_id: String,
    pub split: Split,
}

/// In-memory corpus. Tables and passages are keyed by id; questions keep file
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub name: String,
    pub tables: BTreeMap<String, Table>,
    pub passages: BTreeMap<String, Passage>,
    pub questions: Vec<Question>,
}

impl Corpus {
    pub fn table(&self, id: &str) -> Result<&Table> {
        self.tables.get(id).ok_or_else(|| Error::UnknownTable {
            table_id: id.to_string(),
        })
    }

    pub fn passage(&self, id: &str) -> Option<&Passage> {
        self.passages.get(id)
    }

    pub fn question(&self, id: &str) -> Result<&Question> {
        self.questions.iter().find(|q| q.id == id).ok_or_else(|| {
            // Cheap "nearest" hint: ids sharing a prefix with the request.
            let mut nearest: Vec<String> = self
                .questions
                .iter()
                .map(|q| q.id.clone())
                .filter(|cand| {
                    let n = common_prefix_len(cand, id);
                    n >= 3 || n >= id.len().min(cand.len())
                })
                .take(3)
                .collect();
            nearest.sort();
            Error::UnknownQuestion {
                question_id: id.to_string(),
                nearest,
            }
        })
    }
}

fn common_prefix_len(a: &str, b: &str) -> usize {
    a.bytes().zip(b.bytes()).take_while(|(x, y)| x == y).count()
}

/// A cell link that named a passage id absent from the passage collection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DanglingLink {
    pub table_id: String,
    pub row_index: usize,
    pub column_index: usize,
    pub link_id: String,
}

/// What a load saw: record counts, dropped links, soft warnings.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LoadReport {
    pub tables: usize,
    pub passages: usize,
    pub questions: usize,
    pub dangling_links: Vec<DanglingLink>,
    pub warnings: Vec<String>,
}

#[derive(Debug)]
pub struct CorpusLoad {
    pub corpus: Corpus,
    pub report: LoadReport,
}

/// A validation failure: which entity broke which rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub entity: String,
    pub rule: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.entity, self.rule)
    }
}

/// Check every structural invariant of an in-memory corpus. Returns all
/// violations found, empty when the corpus is well formed.
pub fn validate_corpus(corpus: &Corpus) -> Vec<Violation> {
    let mut out = Vec::new();
    for (id, table) in &corpus.tables {
        let entity = format!("table {id}");
        if *id != table.id {
            out.push(Violation {
                entity: entity.clone(),
                rule: format!("keyed as {id} but carries id {}", table.id),
            });
        }
        if table.headers.is_empty() {
            out.push(Violation {
                entity: entity.clone(),
                rule: "headers must be non-empty".into(),
            });
        }
        for (r, row) in table.rows.iter().enumerate() {
            if row.len() != table.headers.len() {
                out.push(Violation {
                    entity: entity.clone(),
                    rule: format!(
                        "row {r} has {} cells, expected {}",
                        row.len(),
                        table.headers.len()
                    ),
                });
            }
            for (c, cell) in row.iter().enumerate() {
                for link in &cell.link_ids {
                    if !corpus.passages.contains_key(link) {
                        out.push(Violation {
                            entity: entity.clone(),
                            rule: format!("row {r} column {c} links unknown passage {link:?}"),
                        });
                    }
                }
            }
        }
    }
    for (id, passage) in &corpus.passages {
        if *id != passage.id {
            out.push(Violation {
                entity: format!("passage {id}"),
                rule: format!("keyed as {id} but carries id {}", passage.id),
            });
        }
    }
    let mut seen = BTreeSet::new();
    for q in &corpus.questions {
        let entity = format!("question {}", q.id);
        if !seen.insert(q.id.clone()) {
            out.push(Violation {
                entity: entity.clone(),
                rule: "duplicate question id".into(),
            });
        }
        if !corpus.tables.contains_key(&q.table_id) {
            out.push(Violation {
                entity: entity.clone(),
                rule: format!("references unknown table {:?}", q.table_id),
            });
        }
        if q.gold_answer.is_empty() && q.split != Split::Test {
            out.push(Violation {
                entity,
                rule: format!("gold answer must be non-empty for split {}", q.split),
            });
        }
    }
    out
}

/// Passages linked from one row, in column order then link order within the
/// cell, deduplicated by id (first occurrence wins).
pub fn linked_passages<'a>(
    corpus: &'a Corpus,
    table_id: &str,
    row_index: usize,
) -> Result<Vec<&'a Passage>> {
    let table = corpus.table(table_id)?;
    let row = table
        .rows
        .get(row_index)
        .ok_or_else(|| Error::RowIndexOutOfRange {
            table_id: table_id.to_string(),
            row_index,
            rows: table.rows.len(),
        })?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for cell in row {
        for link in &cell.link_ids {
            if seen.insert(link.as_str()) {
                // Loaders drop dangling links, but hand-built corpora may
                // still contain them; skip rather than panic.
                if let Some(p) = corpus.passage(link) {
                    out.push(p);
                }
            }
        }
    }
    Ok(out)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| {
        Error::InvalidConfig(format!("cannot open {}: {e}", path.display()))
    })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: T = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            path: path.display().to_string(),
            record: lineno + 1,
            reason: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

fn malformed(path: &Path, record: usize, reason: impl Into<String>) -> Error {
    Error::MalformedRecord {
        path: path.display().to_string(),
        record,
        reason: reason.into(),
    }
}

/// Options controlling canonical load.
#[derive(Debug, Clone, Default)]
struct LoadOptions {
    /// Force every question onto this split regardless of the stored value.
    force_split: Option<Split>,
}

fn load_canonical_with(
    name: &str,
    tables_path: &Path,
    passages_path: &Path,
    questions_path: &Path,
    options: LoadOptions,
) -> Result<CorpusLoad> {
    let tables: Vec<Table> = read_jsonl(tables_path)?;
    let passages: Vec<Passage> = read_jsonl(passages_path)?;
    let mut questions: Vec<Question> = read_jsonl(questions_path)?;

    let mut report = LoadReport {
        tables: tables.len(),
        passages: passages.len(),
        questions: questions.len(),
        ..LoadReport::default()
    };

    let mut passage_map = BTreeMap::new();
    for (i, p) in passages.into_iter().enumerate() {
        if p.id.is_empty() {
            return Err(malformed(passages_path, i + 1, "empty passage id"));
        }
        if passage_map.insert(p.id.clone(), p).is_some() {
            return Err(malformed(passages_path, i + 1, "duplicate passage id"));
        }
    }

    let mut table_map: BTreeMap<String, Table> = BTreeMap::new();
    for (i, mut t) in tables.into_iter().enumerate() {
        let record = i + 1;
        if t.id.is_empty() {
            return Err(malformed(tables_path, record, "empty table id"));
        }
        if t.headers.is_empty() {
            return Err(malformed(
                tables_path,
                record,
                format!("table {} has no headers", t.id),
            ));
        }
        for (r, row) in t.rows.iter_mut().enumerate() {
            if row.len() != t.headers.len() {
                return Err(malformed(
                    tables_path,
                    record,
                    format!(
                        "table {} row {r} has {} cells, expected {}",
                        t.id,
                        row.len(),
                        t.headers.len()
                    ),
                ));
            }
            for (c, cell) in row.iter_mut().enumerate() {
                cell.link_ids.retain(|link| {
                    let ok = passage_map.contains_key(link);
                    if !ok {
                        report.dangling_links.push(DanglingLink {
                            table_id: t.id.clone(),
                            row_index: r,
                            column_index: c,
                            link_id: link.clone(),
                        });
                    }
                    ok
                });
            }
        }
        if table_map.insert(t.id.clone(), t).is_some() {
            return Err(malformed(tables_path, record, "duplicate table id"));
        }
    }

    let mut seen_questions = BTreeSet::new();
    for (i, q) in questions.iter_mut().enumerate() {
        let record = i + 1;
        if let Some(split) = options.force_split {
            q.split = split;
        }
        if q.id.is_empty() {
            return Err(malformed(questions_path, record, "empty question id"));
        }
        if !seen_questions.insert(q.id.clone()) {
            return Err(malformed(
                questions_path,
                record,
                format!("duplicate question id {}", q.id),
            ));
        }
        if !table_map.contains_key(&q.table_id) {
            return Err(malformed(
                questions_path,
                record,
                format!("question {} references unknown table {:?}", q.id, q.table_id),
            ));
        }
        if q.gold_answer.is_empty() && q.split != Split::Test {
            return Err(malformed(
                questions_path,
                record,
                format!(
                    "question {} on split {} has an empty gold answer",
                    q.id, q.split
                ),
            ));
        }
    }

    if questions.is_empty() {
        let w = format!("{}: no questions loaded", questions_path.display());
        log::warn!("{w}");
        report.warnings.push(w);
    }
    if !report.dangling_links.is_empty() {
        let w = format!(
            "{}: dropped {} dangling passage link(s)",
            tables_path.display(),
            report.dangling_links.len()
        );
        log::warn!("{w}");
        report.warnings.push(w);
    }

    Ok(CorpusLoad {
        corpus: Corpus {
            name: name.to_string(),
            tables: table_map,
            passages: passage_map,
            questions,
        },
        report,
    })
}

fn default_name(tables_path: &Path) -> String {
    tables_path
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".to_string())
}

/// Load a canonical corpus laid out HybridQA-style: splits are taken from the
/// question records themselves.
pub fn load_hybridqa(
    tables_path: impl AsRef<Path>,
    passages_path: impl AsRef<Path>,
    questions_path: impl AsRef<Path>,
) -> Result<CorpusLoad> {
    let tables_path = tables_path.as_ref();
    load_canonical_with(
        &default_name(tables_path),
        tables_path,
        passages_path.as_ref(),
        questions_path.as_ref(),
        LoadOptions::default(),
    )
}

/// Load a canonical corpus as an OTT-QA dev slice: every question is forced
/// onto the dev split (and therefore must carry a gold answer).
pub fn load_ottqa_dev(
    tables_path: impl AsRef<Path>,
    passages_path: impl AsRef<Path>,
    questions_path: impl AsRef<Path>,
) -> Result<CorpusLoad> {
    let tables_path = tables_path.as_ref();
    load_canonical_with(
        &default_name(tables_path),
        tables_path,
        passages_path.as_ref(),
        questions_path.as_ref(),
        LoadOptions {
            force_split: Some(Split::Dev),
        },
    )
}

/// Load a canonical corpus with an explicit name.
pub fn load_named(
    name: &str,
    tables_path: impl AsRef<Path>,
    passages_path: impl AsRef<Path>,
    questions_path: impl AsRef<Path>,
) -> Result<CorpusLoad> {
    load_canonical_with(
        name,
        tables_path.as_ref(),
        passages_path.as_ref(),
        questions_path.as_ref(),
        LoadOptions::default(),
    )
}

fn write_jsonl<T: Serialize>(path: &Path, records: impl Iterator<Item = T>) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for record in records {
        serde_json::to_writer(&mut file, &record)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// Write `tables.jsonl`, `passages.jsonl`, `questions.jsonl` under `dir`.
/// Tables and passages are written in id order, questions in corpus order.
pub fn write_canonical(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join("tables.jsonl"), corpus.tables.values())?;
    write_jsonl(&dir.join("passages.jsonl"), corpus.passages.values())?;
    write_jsonl(&dir.join("questions.jsonl"), corpus.questions.iter())?;
    Ok(())
}
