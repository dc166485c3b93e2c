//! Prompt templates, slot rendering, and few-shot exemplars.
//!
//! Templates are plain text with `{{slot}}` placeholders. Evidence blocks
//! (rows, passages, summary, …) are rendered into the slot values, label
//! included, so an absent block disappears from the prompt entirely instead
//! of leaving an empty heading behind.
//!
//! The three answer-mode templates are built so that, for the same question
//! and retrieval, the standard prompt is a subsequence of the cot prompt,
//! which is a subsequence of the staged-breakdown prompt. Keep that property
//! in mind when editing them.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

/// Every template the pipeline can render, keyed by file stem.
pub const TEMPLATE_KEYS: [&str; 9] = [
    "standard_main_qa",
    "cot_main_qa",
    "ltm_main_qa",
    "ttqa_rs_main_qa",
    "ttqa_rs_sub_qa",
    "ttqa_rs_summarize",
    "ttqa_rs_decompose",
    "linearize",
    "keywords",
];

const BUILTIN: [(&str, &str); 9] = [
    (
        "standard_main_qa",
        include_str!("../../templates/standard_main_qa.txt"),
    ),
    ("cot_main_qa", include_str!("../../templates/cot_main_qa.txt")),
    ("ltm_main_qa", include_str!("../../templates/ltm_main_qa.txt")),
    (
        "ttqa_rs_main_qa",
        include_str!("../../templates/ttqa_rs_main_qa.txt"),
    ),
    (
        "ttqa_rs_sub_qa",
        include_str!("../../templates/ttqa_rs_sub_qa.txt"),
    ),
    (
        "ttqa_rs_summarize",
        include_str!("../../templates/ttqa_rs_summarize.txt"),
    ),
    (
        "ttqa_rs_decompose",
        include_str!("../../templates/ttqa_rs_decompose.txt"),
    ),
    ("linearize", include_str!("../../templates/linearize.txt")),
    ("keywords", include_str!("../../templates/keywords.txt")),
];

#[derive(Debug, Clone)]
pub struct PromptLibrary {
    templates: BTreeMap<String, String>,
}

impl PromptLibrary {
    /// The templates compiled into the crate.
    pub fn builtin() -> PromptLibrary {
        PromptLibrary {
            templates: BUILTIN
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    /// Builtin templates with per-file overrides from `dir` (`<key>.txt`).
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<PromptLibrary> {
        let dir = dir.as_ref();
        let mut lib = PromptLibrary::builtin();
        for key in TEMPLATE_KEYS {
            let path = dir.join(format!("{key}.txt"));
            if path.exists() {
                let text = std::fs::read_to_string(&path).map_err(|e| {
                    Error::InvalidConfig(format!("cannot read template {}: {e}", path.display()))
                })?;
                lib.templates.insert(key.to_string(), text);
            }
        }
        Ok(lib)
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.templates
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::InvalidRequest(format!("unknown template {key:?}")))
    }

    /// Substitute `{{slot}}` placeholders. Every placeholder in the template
    /// must have a value; leftovers mean a typo somewhere and are an error.
    pub fn render(&self, key: &str, slots: &BTreeMap<&str, String>) -> Result<String> {
        let mut text = self.get(key)?.to_string();
        for (name, value) in slots {
            text = text.replace(&format!("{{{{{name}}}}}"), value);
        }
        if let Some(pos) = text.find("{{") {
            let tail: String = text[pos..].chars().take(30).collect();
            return Err(Error::InvalidRequest(format!(
                "template {key:?} has unfilled slot near {tail:?}"
            )));
        }
        Ok(text)
    }

    /// SHA-256 of each template's text, for config snapshots.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.templates
            .iter()
            .map(|(k, v)| {
                let digest = Sha256::digest(v.as_bytes());
                let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
                (k.clone(), hex)
            })
            .collect()
    }
}

/// One few-shot exemplar. QA exemplars use `context`/`reasoning`/`answer`;
/// decomposition exemplars use `sub_question` (with `answer` as the expected
/// sub-answer, kept for reference but not rendered).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShotExample {
    pub question: String,
    pub context: String,
    pub reasoning: String,
    pub answer: String,
    pub sub_question: String,
}

#[derive(Debug, Clone)]
pub struct ShotSet {
    pub qa: Vec<ShotExample>,
    pub decompose: Vec<ShotExample>,
}

impl ShotSet {
    pub fn builtin() -> ShotSet {
        let qa = serde_json::from_str(include_str!("../../assets/shots_qa.json"))
            .expect("builtin QA shots parse");
        let decompose = serde_json::from_str(include_str!("../../assets/shots_decompose.json"))
            .expect("builtin decompose shots parse");
        ShotSet { qa, decompose }
    }

    pub fn from_files(qa_path: impl AsRef<Path>, decompose_path: impl AsRef<Path>) -> Result<ShotSet> {
        let read = |path: &Path| -> Result<Vec<ShotExample>> {
            let bytes = std::fs::read(path).map_err(|e| {
                Error::InvalidConfig(format!("cannot read shots {}: {e}", path.display()))
            })?;
            serde_json::from_slice(&bytes)
                .map_err(|e| Error::InvalidConfig(format!("invalid shots {}: {e}", path.display())))
        };
        let set = ShotSet {
            qa: read(qa_path.as_ref())?,
            decompose: read(decompose_path.as_ref())?,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, shot) in self.qa.iter().enumerate() {
            if shot.question.is_empty() || shot.answer.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "QA shot {i} needs a question and an answer"
                )));
            }
        }
        for (i, shot) in self.decompose.iter().enumerate() {
            if shot.question.is_empty() || shot.sub_question.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "decompose shot {i} needs a question and a sub_question"
                )));
            }
        }
        Ok(())
    }
}

/// How QA exemplars are rendered: with or without the reasoning line. The
/// plain rendering is a subsequence of the reasoning rendering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShotStyle {
    Plain,
    Reasoning,
}

pub fn render_qa_shots(shots: &[ShotExample], n: usize, style: ShotStyle) -> String {
    let mut out = String::new();
    for shot in shots.iter().take(n) {
        out.push_str(&format!("Question: {}\n", shot.question));
        if !shot.context.is_empty() {
            out.push_str(&format!("Context: {}\n", shot.context));
        }
        if style == ShotStyle::Reasoning && !shot.reasoning.is_empty() {
            out.push_str(&format!("Reasoning: {}\n", shot.reasoning));
        }
        out.push_str(&format!("Answer: {}\n\n", shot.answer));
    }
    out
}

pub fn render_decompose_shots(shots: &[ShotExample], n: usize) -> String {
    let mut out = String::new();
    for shot in shots.iter().take(n) {
        out.push_str(&format!(
            "Question: {}\nSub-question: {}\n\n",
            shot.question, shot.sub_question
        ));
    }
    out
}

pub fn rows_block(sentences: &[String]) -> String {
    if sentences.is_empty() {
        return String::new();
    }
    let mut out = String::from("Table rows:\n");
    for s in sentences {
        out.push_str(&format!("- {s}\n"));
    }
    out.push('\n');
    out
}

/// `passages` are (title, text) pairs; titles may be empty.
pub fn passages_block(passages: &[(String, String)]) -> String {
    if passages.is_empty() {
        return String::new();
    }
    let mut out = String::from("Passages:\n");
    for (title, text) in passages {
        if title.is_empty() {
            out.push_str(&format!("- {text}\n"));
        } else {
            out.push_str(&format!("- {title}: {text}\n"));
        }
    }
    out.push('\n');
    out
}

pub fn summary_block(summary: &str) -> String {
    if summary.is_empty() {
        String::new()
    } else {
        format!("Summary: {summary}\n\n")
    }
}

pub fn entity_block(label: &str) -> String {
    if label.is_empty() {
        String::new()
    } else {
        format!("The expected answer type is {label}.\n\n")
    }
}

pub fn sub_question_block(sub_question: &str) -> String {
    if sub_question.is_empty() {
        String::new()
    } else {
        format!("Sub-question: {sub_question}\n")
    }
}

pub fn sub_answer_block(sub_answer: &str) -> String {
    if sub_answer.is_empty() {
        String::new()
    } else {
        format!("Sub-answer: {sub_answer}\n\n")
    }
}

/// True when `needle` is a subsequence of `haystack` (characters in order,
/// not necessarily contiguous).
pub fn is_subsequence(needle: &str, haystack: &str) -> bool {
    let mut chars = needle.chars();
    let mut current = chars.next();
    for ch in haystack.chars() {
        match current {
            Some(c) if c == ch => current = chars.next(),
            Some(_) => {}
            None => return true,
        }
    }
    current.is_none()
}
