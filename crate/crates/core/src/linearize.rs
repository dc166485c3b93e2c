//! Row linearization: turning a table row into a sentence for embedding.
//!
//! The template form is deterministic: `"<header> is <cell>"` clauses joined
//! with `"; "` and closed with a period, optionally prefixed with the page
//! and section titles. The generative form asks a backend to phrase the row
//! naturally and falls back to the template when the model returns nothing.

use crate::backend::{GenerationRequest, ModelBackend};
use crate::corpus::Table;
use crate::error::{Error, Result, Stage};
use crate::reader::prompt::PromptLibrary;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearizeMode {
    #[default]
    Template,
    Generative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearizationStyle {
    pub mode: LinearizeMode,
    /// Prefix sentences with `In <page_title> (<section_title>), `.
    pub include_title: bool,
}

fn row<'a>(table: &'a Table, row_index: usize) -> Result<&'a [crate::corpus::Cell]> {
    table
        .rows
        .get(row_index)
        .map(|r| r.as_slice())
        .ok_or_else(|| Error::RowIndexOutOfRange {
            table_id: table.id.clone(),
            row_index,
            rows: table.rows.len(),
        })
}

/// Template sentence for one row.
pub fn row_to_sentence(table: &Table, row_index: usize, style: LinearizationStyle) -> Result<String> {
    let cells = row(table, row_index)?;
    let mut sentence = String::new();
    if style.include_title {
        if table.section_title.is_empty() {
            sentence.push_str(&format!("In {}, ", table.page_title));
        } else {
            sentence.push_str(&format!("In {} ({}), ", table.page_title, table.section_title));
        }
    }
    let clauses: Vec<String> = table
        .headers
        .iter()
        .zip(cells)
        .map(|(header, cell)| {
            let value = if cell.text.trim().is_empty() {
                "unknown"
            } else {
                cell.text.as_str()
            };
            format!("{header} is {value}")
        })
        .collect();
    sentence.push_str(&clauses.join("; "));
    sentence.push('.');
    Ok(sentence)
}

/// Raw form of one row: cell texts joined with spaces, empty cells skipped.
/// This is the degraded representation the sentence form is measured against.
pub fn raw_row_text(table: &Table, row_index: usize) -> Result<String> {
    let cells = row(table, row_index)?;
    Ok(cells
        .iter()
        .map(|c| c.text.trim())
        .filter(|t| !t.is_empty())
        .collect::<Vec<_>>()
        .join(" "))
}

/// Template sentences for every row, in row order.
pub fn linearize_table(table: &Table, style: LinearizationStyle) -> Result<Vec<String>> {
    (0..table.rows.len())
        .map(|i| row_to_sentence(table, i, style))
        .collect()
}

/// Ask a backend to phrase the row as one sentence. An empty completion falls
/// back to the template sentence; backend failures surface as linearize-stage
/// errors.
pub fn generative_row_to_sentence(
    backend: &dyn ModelBackend,
    templates: &PromptLibrary,
    table: &Table,
    row_index: usize,
    style: LinearizationStyle,
) -> Result<String> {
    let template_sentence = row_to_sentence(table, row_index, style)?;
    let prompt = templates.render(
        "linearize",
        &[("row", template_sentence.clone())].into_iter().collect(),
    )?;
    let request = GenerationRequest::new(prompt).with_temperature(0.0).with_max_tokens(50);
    let result = backend
        .generate(&request)
        .map_err(|e| e.at_stage(Stage::Linearize))?;
    let sentence = result.samples[0].trim();
    if sentence.is_empty() {
        log::warn!(
            "generative linearization of {}[{row_index}] returned nothing; using template",
            table.id
        );
        Ok(template_sentence)
    } else {
        Ok(sentence.to_string())
    }
}
