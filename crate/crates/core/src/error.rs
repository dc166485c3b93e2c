//! Error types shared across the pipeline.
//!
//! Every fallible operation returns [`Result`]. Errors that originate in a
//! model call carry the pipeline [`Stage`] they were issued from, so a failed
//! question can be attributed to the stage that sank it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Pipeline stages that issue model calls. Used for backend routing and for
/// attributing per-question failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Linearize,
    Embed,
    Rerank,
    Keywords,
    Summarize,
    Decompose,
    SubQa,
    MainQa,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Linearize,
        Stage::Embed,
        Stage::Rerank,
        Stage::Keywords,
        Stage::Summarize,
        Stage::Decompose,
        Stage::SubQa,
        Stage::MainQa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Linearize => "linearize",
            Stage::Embed => "embed",
            Stage::Rerank => "rerank",
            Stage::Keywords => "keywords",
            Stage::Summarize => "summarize",
            Stage::Decompose => "decompose",
            Stage::SubQa => "sub_qa",
            Stage::MainQa => "main_qa",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.iter().copied().find(|st| st.name() == s)
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{record}: malformed record: {reason}")]
    MalformedRecord {
        path: String,
        record: usize,
        reason: String,
    },

    #[error("unknown table id {table_id:?}")]
    UnknownTable { table_id: String },

    #[error("unknown question id {question_id:?}{}", nearest_hint(.nearest))]
    UnknownQuestion {
        question_id: String,
        nearest: Vec<String>,
    },

    #[error("row index {row_index} out of range for table {table_id:?} with {rows} rows")]
    RowIndexOutOfRange {
        table_id: String,
        row_index: usize,
        rows: usize,
    },

    #[error("backend {backend_id:?}{} failed{}: {message}", stage_hint(.stage), status_hint(.status))]
    Backend {
        backend_id: String,
        stage: Option<Stage>,
        status: Option<u16>,
        message: String,
    },

    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("cache entry {key} is corrupt: {reason}")]
    CacheCorrupt { key: String, reason: String },

    #[error("invalid request: {0}")]
    InvalidRequest(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("missing trace for question(s): {}", question_ids.join(", "))]
    MissingTrace { question_ids: Vec<String> },

    #[error("reports cover different corpora: {expected:?} vs {actual:?}")]
    MismatchedCorpus { expected: String, actual: String },

    #[error("run produced no evaluable questions")]
    EmptyRun,

    #[error("all {total} questions failed")]
    TotalFailure { total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attach a stage to a backend error that does not have one yet.
    pub fn at_stage(self, stage: Stage) -> Error {
        match self {
            Error::Backend {
                backend_id,
                stage: None,
                status,
                message,
            } => Error::Backend {
                backend_id,
                stage: Some(stage),
                status,
                message,
            },
            other => other,
        }
    }

    /// Stage the error is attributed to, when it carries one.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            Error::Backend { stage, .. } => *stage,
            _ => None,
        }
    }
}

fn nearest_hint(nearest: &[String]) -> String {
    if nearest.is_empty() {
        String::new()
    } else {
        format!(" (nearest: {})", nearest.join(", "))
    }
}

fn stage_hint(stage: &Option<Stage>) -> String {
    match stage {
        Some(s) => format!(" at stage {s}"),
        None => String::new(),
    }
}

fn status_hint(status: &Option<u16>) -> String {
    match status {
        Some(s) => format!(" with status {s}"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for stage in Stage::ALL {
            assert_eq!(Stage::parse(stage.name()), Some(stage));
        }
        assert_eq!(Stage::parse("bogus"), None);
    }

    #[test]
    fn stage_serializes_as_snake_case() {
        let s = serde_json::to_string(&Stage::SubQa).unwrap();
        assert_eq!(s, "\"sub_qa\"");
    }

    #[test]
    fn at_stage_tags_backend_errors_only() {
        let err = Error::Backend {
            backend_id: "m".into(),
            stage: None,
            status: None,
            message: "boom".into(),
        }
        .at_stage(Stage::Summarize);
        assert_eq!(err.stage(), Some(Stage::Summarize));

        let err = Error::EmptyRun.at_stage(Stage::Summarize);
        assert_eq!(err.stage(), None);
    }

    #[test]
    fn backend_error_message_includes_stage_and_status() {
        let err = Error::Backend {
            backend_id: "api".into(),
            stage: Some(Stage::MainQa),
            status: Some(500),
            message: "server error".into(),
        };
        let text = err.to_string();
        assert!(text.contains("main_qa"), "{text}");
        assert!(text.contains("500"), "{text}");
    }
}
