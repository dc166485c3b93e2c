//! Rule-based prediction of the expected answer's entity type.
//!
//! The question's interrogative shape usually gives the answer type away —
//! "who" wants a person, "when" a date, "how many" a number. Rules live in a
//! JSON asset, are tried in order, and the first match wins; anything
//! unmatched is `Other`. Always total: never fails, never needs a model call.
//!
//! Rule order matters: content-anchored rules (population, capacity, many)
//! come before the loose interrogative+noun pairs, so "population of the
//! hometown of the Player of the Year" reads as a number question, not a
//! year question.

use crate::text::tokenize;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::sync::OnceLock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EntityType {
    Person,
    Date,
    Number,
    Location,
    Organization,
    Event,
    Work,
    Other,
}

impl EntityType {
    pub fn label(self) -> &'static str {
        match self {
            EntityType::Person => "PERSON",
            EntityType::Date => "DATE",
            EntityType::Number => "NUMBER",
            EntityType::Location => "LOCATION",
            EntityType::Organization => "ORGANIZATION",
            EntityType::Event => "EVENT",
            EntityType::Work => "WORK",
            EntityType::Other => "OTHER",
        }
    }
}

impl std::fmt::Display for EntityType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Deserialize)]
struct EntityRule {
    label: EntityType,
    /// Must equal the question's first token.
    #[serde(default)]
    first_token: Option<String>,
    /// Must all occur among the question's tokens.
    #[serde(default)]
    all_tokens: Vec<String>,
}

fn rules() -> &'static [EntityRule] {
    static RULES: OnceLock<Vec<EntityRule>> = OnceLock::new();
    RULES.get_or_init(|| {
        serde_json::from_str(include_str!("../../assets/entity_rules.json"))
            .expect("builtin entity rules parse")
    })
}

/// Predict the expected answer type of a question. Total over all strings.
pub fn predict_entity_type(question: &str) -> EntityType {
    let tokens = tokenize(question);
    let token_set: BTreeSet<&str> = tokens.iter().map(|s| s.as_str()).collect();
    let first = tokens.first().map(|s| s.as_str());
    for rule in rules() {
        if let Some(required) = &rule.first_token {
            if first != Some(required.as_str()) {
                continue;
            }
        }
        if rule.all_tokens.iter().all(|t| token_set.contains(t.as_str())) {
            return rule.label;
        }
    }
    EntityType::Other
}
