//! The reading half of the pipeline: answering a question from its retrieved
//! evidence.
//!
//! Four modes share one entry point. `standard` asks directly, `cot` adds
//! worked reasoning to the exemplars, `ltm` asks the model to decompose as it
//! answers, and `ttqa_rs` runs the staged breakdown: summarize the evidence,
//! split off a sub-question, predict the expected answer type, answer the
//! sub-question, then answer the main question with all of that in context.
//! Intermediate stages degrade gracefully — a failed summary or sub-answer
//! leaves its slot empty and is noted on the trace; only a failed final
//! stage fails the question.

pub mod answer;
pub mod entity;
pub mod prompt;

use crate::backend::{BackendSet, GenerationRequest};
use crate::corpus::{Corpus, Question};
use crate::error::{Result, Stage};
use crate::retrieve::RetrievalResult;
use crate::Real;
use answer::{majority_vote, parse_answer};
use entity::{predict_entity_type, EntityType};
use prompt::{
    entity_block, passages_block, render_decompose_shots, render_qa_shots, rows_block,
    sub_answer_block, sub_question_block, summary_block, PromptLibrary, ShotSet, ShotStyle,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReaderMode {
    #[default]
    Standard,
    Cot,
    Ltm,
    TtqaRs,
}

impl ReaderMode {
    pub const ALL: [ReaderMode; 4] = [
        ReaderMode::Standard,
        ReaderMode::Cot,
        ReaderMode::Ltm,
        ReaderMode::TtqaRs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReaderMode::Standard => "standard",
            ReaderMode::Cot => "cot",
            ReaderMode::Ltm => "ltm",
            ReaderMode::TtqaRs => "ttqa_rs",
        }
    }
}

impl std::fmt::Display for ReaderMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ReaderConfig {
    pub mode: ReaderMode,
    /// QA exemplars prepended to sub- and main-question prompts. The
    /// decomposition stage always uses its own fixed two exemplars.
    pub shots: usize,
    /// Samples drawn at the final stage; answers are majority-voted.
    pub self_consistency_samples: u32,
    pub temperature: Real,
    pub max_tokens: u32,
}

impl Default for ReaderConfig {
    fn default() -> Self {
        ReaderConfig {
            mode: ReaderMode::Standard,
            shots: 2,
            self_consistency_samples: 1,
            temperature: 0.5,
            max_tokens: 256,
        }
    }
}

impl ReaderConfig {
    pub fn validate(&self, shots: &ShotSet) -> Result<()> {
        use crate::error::Error;
        if self.self_consistency_samples == 0 {
            return Err(Error::InvalidConfig(
                "self_consistency_samples must be at least 1".into(),
            ));
        }
        if self.self_consistency_samples > 1 && self.self_consistency_samples % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "self_consistency_samples must be odd to avoid split votes, got {}",
                self.self_consistency_samples
            )));
        }
        if self.shots > shots.qa.len() {
            return Err(Error::InvalidConfig(format!(
                "config asks for {} shots but only {} QA exemplars are available",
                self.shots,
                shots.qa.len()
            )));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::InvalidConfig(format!(
                "temperature {} out of range [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(Error::InvalidConfig("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// Everything the reader produced for one question, including the exact
/// prompts and raw completions per stage. This is the record of what
/// happened; evaluation and debugging both read it.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ReaderTrace {
    pub question_id: String,
    pub mode: ReaderMode,
    pub final_answer: String,
    pub summary: String,
    pub sub_question: String,
    pub sub_answer: String,
    pub entity_type_main: Option<EntityType>,
    pub entity_type_sub: Option<EntityType>,
    /// Vote tally over parsed final-stage samples.
    pub votes: BTreeMap<String, u64>,
    /// Stage name → the prompt sent to the backend.
    pub prompts: BTreeMap<String, String>,
    /// Stage name → raw completion samples, untouched.
    pub completions: BTreeMap<String, Vec<String>>,
    pub failed_stage: Option<Stage>,
    /// Human-readable notes about degradations (skipped or recovered
    /// stages). Empty on a clean run.
    pub fallbacks: Vec<String>,
}

impl ReaderTrace {
    pub fn empty(question_id: &str) -> ReaderTrace {
        ReaderTrace {
            question_id: question_id.to_string(),
            ..ReaderTrace::default()
        }
    }
}

/// Shared context for the stage operations.
pub struct ReaderEnv<'a> {
    pub backends: &'a BackendSet,
    pub templates: &'a PromptLibrary,
    pub shots: &'a ShotSet,
    pub config: &'a ReaderConfig,
}

/// Prompt sent and samples received for one stage call.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub prompt: String,
    pub samples: Vec<String>,
}

fn call(
    env: &ReaderEnv,
    stage: Stage,
    template_key: &str,
    slots: &BTreeMap<&str, String>,
    n_samples: u32,
) -> Result<StageOutput> {
    let prompt = env.templates.render(template_key, slots)?;
    let request = GenerationRequest::new(prompt.clone())
        .with_temperature(env.config.temperature)
        .with_max_tokens(env.config.max_tokens)
        .with_samples(n_samples);
    let backend = env.backends.for_stage(stage)?;
    let result = backend
        .generate(&request)
        .map_err(|e| e.at_stage(stage))?;
    Ok(StageOutput {
        prompt,
        samples: result.samples,
    })
}

/// Summarize the evidence. Requires at least one row sentence or passage.
pub fn summarize(
    env: &ReaderEnv,
    rows: &[String],
    passages: &[(String, String)],
) -> Result<StageOutput> {
    if rows.is_empty() && passages.is_empty() {
        return Err(crate::error::Error::InvalidRequest(
            "nothing to summarize: no rows and no passages".into(),
        ));
    }
    let slots = BTreeMap::from([
        ("rows", rows_block(rows)),
        ("passages", passages_block(passages)),
    ]);
    call(env, Stage::Summarize, "ttqa_rs_summarize", &slots, 1)
}

/// Split the question into the sub-question that must be answered first.
/// Always two-shot with the fixed decomposition exemplars.
pub fn decompose(env: &ReaderEnv, question: &str) -> Result<StageOutput> {
    let slots = BTreeMap::from([
        ("shots", render_decompose_shots(&env.shots.decompose, 2)),
        ("question", question.to_string()),
    ]);
    call(env, Stage::Decompose, "ttqa_rs_decompose", &slots, 1)
}

/// The sub-question the decomposition completion proposes: its first
/// non-empty line, minus any echoed label.
pub fn parse_sub_question(completion: &str) -> String {
    let line = completion
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("");
    let line = line
        .strip_prefix("Sub-question:")
        .or_else(|| line.strip_prefix("sub-question:"))
        .unwrap_or(line);
    line.trim().to_string()
}

/// Answer the sub-question against the evidence, with the summary and the
/// expected answer type in context.
pub fn sub_question_qa(
    env: &ReaderEnv,
    rows: &[String],
    passages: &[(String, String)],
    summary: &str,
    entity: EntityType,
    sub_question: &str,
) -> Result<StageOutput> {
    let slots = BTreeMap::from([
        ("rows", rows_block(rows)),
        ("passages", passages_block(passages)),
        ("summary", summary_block(summary)),
        ("entity_type", entity_block(entity.label())),
        (
            "shots",
            render_qa_shots(&env.shots.qa, env.config.shots, ShotStyle::Reasoning),
        ),
        ("question", sub_question.to_string()),
    ]);
    call(env, Stage::SubQa, "ttqa_rs_sub_qa", &slots, 1)
}

/// Extra context the staged-breakdown final prompt carries.
#[derive(Debug, Clone, Default)]
pub struct BreakdownContext {
    pub summary: String,
    pub entity: Option<EntityType>,
    pub sub_question: String,
    pub sub_answer: String,
}

/// The final answering call for any mode. `breakdown` is required in
/// `ttqa_rs` mode and ignored otherwise. Draws
/// `config.self_consistency_samples` samples.
pub fn main_qa(
    env: &ReaderEnv,
    mode: ReaderMode,
    rows: &[String],
    passages: &[(String, String)],
    breakdown: Option<&BreakdownContext>,
    question: &str,
) -> Result<StageOutput> {
    let (template_key, style) = match mode {
        ReaderMode::Standard => ("standard_main_qa", ShotStyle::Plain),
        ReaderMode::Cot => ("cot_main_qa", ShotStyle::Reasoning),
        ReaderMode::Ltm => ("ltm_main_qa", ShotStyle::Reasoning),
        ReaderMode::TtqaRs => ("ttqa_rs_main_qa", ShotStyle::Reasoning),
    };
    let mut slots = BTreeMap::from([
        ("rows", rows_block(rows)),
        ("passages", passages_block(passages)),
        (
            "shots",
            render_qa_shots(&env.shots.qa, env.config.shots, style),
        ),
        ("question", question.to_string()),
    ]);
    if mode == ReaderMode::TtqaRs {
        let b = breakdown.ok_or_else(|| {
            crate::error::Error::InvalidRequest(
                "staged mode needs the breakdown context for the final prompt".into(),
            )
        })?;
        slots.insert("summary", summary_block(&b.summary));
        slots.insert(
            "entity_type",
            entity_block(b.entity.map(EntityType::label).unwrap_or("")),
        );
        slots.insert("sub_question", sub_question_block(&b.sub_question));
        slots.insert("sub_answer", sub_answer_block(&b.sub_answer));
    }
    call(
        env,
        Stage::MainQa,
        template_key,
        &slots,
        env.config.self_consistency_samples,
    )
}

fn record(trace: &mut ReaderTrace, stage: Stage, out: &StageOutput) {
    trace.prompts.insert(stage.name().to_string(), out.prompt.clone());
    trace
        .completions
        .insert(stage.name().to_string(), out.samples.clone());
}

fn first_sample(out: &StageOutput) -> &str {
    out.samples.first().map(String::as_str).unwrap_or("")
}

/// Answer one question from its retrieval. Stage failures are recorded on
/// the trace instead of propagated: intermediate stages fall back (empty
/// summary, undecomposed question, empty sub-answer), and only a failed
/// final stage marks the question failed.
pub fn run(
    env: &ReaderEnv,
    question: &Question,
    retrieval: &RetrievalResult,
    corpus: &Corpus,
) -> ReaderTrace {
    let mut trace = ReaderTrace::empty(&question.id);
    trace.mode = env.config.mode;

    let rows: Vec<String> = retrieval.rows.iter().map(|r| r.sentence.clone()).collect();
    let mut passages: Vec<(String, String)> = Vec::new();
    for candidate in &retrieval.passages {
        match corpus.passage(&candidate.passage_id) {
            Some(p) => passages.push((p.title.clone(), p.text.clone())),
            None => {
                log::warn!(
                    "passage {} retrieved for {} is not in the corpus; dropping it",
                    candidate.passage_id,
                    question.id
                );
                trace
                    .fallbacks
                    .push(format!("passage {} missing from corpus", candidate.passage_id));
            }
        }
    }

    let breakdown = if env.config.mode == ReaderMode::TtqaRs {
        Some(run_breakdown(env, question, &rows, &passages, &mut trace))
    } else {
        None
    };

    match main_qa(
        env,
        env.config.mode,
        &rows,
        &passages,
        breakdown.as_ref(),
        &question.text,
    ) {
        Ok(out) => {
            record(&mut trace, Stage::MainQa, &out);
            let answers: Vec<String> = out.samples.iter().map(|s| parse_answer(s)).collect();
            let (winner, votes) = majority_vote(&answers);
            trace.final_answer = winner;
            trace.votes = votes;
        }
        Err(e) => {
            log::warn!("final answer stage failed for {}: {e}", question.id);
            trace.failed_stage = Some(Stage::MainQa);
            trace.fallbacks.push(format!("main_qa failed: {e}"));
        }
    }
    trace
}

/// The three intermediate stages of the staged mode, each with its
/// fallback. Returns the context for the final prompt.
fn run_breakdown(
    env: &ReaderEnv,
    question: &Question,
    rows: &[String],
    passages: &[(String, String)],
    trace: &mut ReaderTrace,
) -> BreakdownContext {
    let mut ctx = BreakdownContext::default();

    if rows.is_empty() && passages.is_empty() {
        trace.fallbacks.push("summarize skipped: no evidence".into());
    } else {
        match summarize(env, rows, passages) {
            Ok(out) => {
                record(trace, Stage::Summarize, &out);
                ctx.summary = first_sample(&out).trim().to_string();
            }
            Err(e) => {
                log::warn!("summarize failed for {}: {e}", question.id);
                trace.fallbacks.push(format!("summarize failed: {e}"));
            }
        }
    }
    trace.summary = ctx.summary.clone();

    match decompose(env, &question.text) {
        Ok(out) => {
            record(trace, Stage::Decompose, &out);
            ctx.sub_question = parse_sub_question(first_sample(&out));
            if ctx.sub_question.is_empty() {
                trace
                    .fallbacks
                    .push("decompose returned nothing: using the question itself".into());
                ctx.sub_question = question.text.clone();
            }
        }
        Err(e) => {
            log::warn!("decompose failed for {}: {e}", question.id);
            trace
                .fallbacks
                .push(format!("decompose failed: using the question itself ({e})"));
            ctx.sub_question = question.text.clone();
        }
    }
    trace.sub_question = ctx.sub_question.clone();

    let entity_sub = predict_entity_type(&ctx.sub_question);
    let entity_main = predict_entity_type(&question.text);
    trace.entity_type_sub = Some(entity_sub);
    trace.entity_type_main = Some(entity_main);
    ctx.entity = Some(entity_main);

    match sub_question_qa(env, rows, passages, &ctx.summary, entity_sub, &ctx.sub_question) {
        Ok(out) => {
            record(trace, Stage::SubQa, &out);
            ctx.sub_answer = parse_answer(first_sample(&out));
        }
        Err(e) => {
            log::warn!("sub-question stage failed for {}: {e}", question.id);
            trace
                .fallbacks
                .push(format!("sub_qa failed: continuing without a sub-answer ({e})"));
        }
    }
    trace.sub_answer = ctx.sub_answer.clone();
    ctx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendSet, MockBackend, MockScript, ScriptRule};
    use crate::corpus::{Corpus, Passage, Question, Split};
    use crate::retrieve::{PassageCandidate, RetrievalResult, RowCandidate};
    use prompt::is_subsequence;
    use std::sync::Arc;

    // Patterns anchored to each stage's instruction line, so every prompt
    // matches exactly one rule.
    const SUMMARIZE: &str = "Write a short summary";
    const DECOMPOSE: &str = "Break the question into";
    const SUB_QA: &str = "Think through the evidence";
    const MAIN_QA: &str = "Give a short answer.";

    fn rule(contains: &str, responses: &[&str]) -> ScriptRule {
        ScriptRule {
            contains: vec![contains.to_string()],
            responses: responses.iter().map(|s| s.to_string()).collect(),
            fail: false,
            truncated: false,
        }
    }

    fn fail_rule(contains: &str) -> ScriptRule {
        ScriptRule {
            contains: vec![contains.to_string()],
            responses: vec![],
            fail: true,
            truncated: false,
        }
    }

    fn scripted(rules: Vec<ScriptRule>) -> MockBackend {
        MockBackend::scripted("default", MockScript { rules, default: None })
    }

    fn question() -> Question {
        Question {
            id: "q1".into(),
            text: "When was the game released ?".into(),
            gold_answer: "16 March 2010".into(),
            table_id: "t1".into(),
            split: Split::Dev,
        }
    }

    fn corpus() -> Corpus {
        Corpus {
            name: "fixture".into(),
            tables: Default::default(),
            passages: [(
                "p1".to_string(),
                Passage {
                    id: "p1".into(),
                    title: "Rugby League 3".into(),
                    text: "Rugby League 3 was released on 16 March 2010.".into(),
                },
            )]
            .into(),
            questions: vec![question()],
        }
    }

    fn retrieval() -> RetrievalResult {
        RetrievalResult {
            question_id: "q1".into(),
            rows: vec![RowCandidate {
                table_id: "t1".into(),
                row_index: 0,
                sentence: "Game is Rugby League 3; Commentator is Andrew Voss.".into(),
                score: 0.9,
            }],
            passages: vec![PassageCandidate {
                passage_id: "p1".into(),
                score: 0.8,
                source_row_index: 0,
            }],
            intermediate_passages: vec![],
            keywords: vec![],
        }
    }

    fn env_parts(backend: MockBackend) -> (BackendSet, PromptLibrary, ShotSet) {
        (
            BackendSet::single(Arc::new(backend)),
            PromptLibrary::builtin(),
            ShotSet::builtin(),
        )
    }

    fn run_with(backend: MockBackend, config: ReaderConfig) -> ReaderTrace {
        let (backends, templates, shots) = env_parts(backend);
        let env = ReaderEnv {
            backends: &backends,
            templates: &templates,
            shots: &shots,
            config: &config,
        };
        run(&env, &question(), &retrieval(), &corpus())
    }

    #[test]
    fn standard_mode_is_a_single_stage() {
        let backend = scripted(vec![rule(MAIN_QA, &["The answer is 16 March 2010."])]);
        let trace = run_with(backend, ReaderConfig::default());
        assert_eq!(trace.final_answer, "16 March 2010");
        assert!(trace.failed_stage.is_none());
        assert_eq!(trace.prompts.len(), 1);
        assert!(trace.prompts.contains_key("main_qa"));
        assert_eq!(trace.summary, "");
        assert!(trace.entity_type_main.is_none());
        assert_eq!(trace.votes["16 March 2010"], 1);
    }

    #[test]
    fn staged_mode_runs_all_five_stages() {
        let backend = scripted(vec![
            rule(SUMMARIZE, &["Rugby League 3 was commentated by Andrew Voss."]),
            rule(DECOMPOSE, &["Sub-question: When was Rugby League 3 released ?"]),
            rule(SUB_QA, &["The answer is 16 March 2010."]),
            rule(MAIN_QA, &["The answer is 16 March 2010."]),
        ]);
        let mut config = ReaderConfig::default();
        config.mode = ReaderMode::TtqaRs;
        let trace = run_with(backend, config);
        assert!(trace.failed_stage.is_none(), "{:?}", trace.fallbacks);
        assert_eq!(trace.final_answer, "16 March 2010");
        assert_eq!(trace.summary, "Rugby League 3 was commentated by Andrew Voss.");
        assert_eq!(trace.sub_question, "When was Rugby League 3 released ?");
        assert_eq!(trace.sub_answer, "16 March 2010");
        assert_eq!(trace.entity_type_main, Some(EntityType::Date));
        assert_eq!(trace.entity_type_sub, Some(EntityType::Date));
        let stages: Vec<&str> = trace.prompts.keys().map(String::as_str).collect();
        assert_eq!(stages, vec!["decompose", "main_qa", "sub_qa", "summarize"]);
        assert!(trace.fallbacks.is_empty());
    }

    #[test]
    fn staged_prompt_carries_the_intermediate_products() {
        let backend = scripted(vec![
            rule(SUMMARIZE, &["A summary sentence."]),
            rule(DECOMPOSE, &["When was Rugby League 3 released ?"]),
            rule(SUB_QA, &["The answer is 16 March 2010."]),
            rule(MAIN_QA, &["The answer is 16 March 2010."]),
        ]);
        let mut config = ReaderConfig::default();
        config.mode = ReaderMode::TtqaRs;
        let trace = run_with(backend, config);
        let main_prompt = &trace.prompts["main_qa"];
        assert!(main_prompt.contains("Summary: A summary sentence."));
        assert!(main_prompt.contains("The expected answer type is DATE."));
        assert!(main_prompt.contains("Sub-question: When was Rugby League 3 released ?"));
        assert!(main_prompt.contains("Sub-answer: 16 March 2010"));
        // The sub-question prompt has the summary but not the sub-answer.
        let sub_prompt = &trace.prompts["sub_qa"];
        assert!(sub_prompt.contains("Summary: A summary sentence."));
        assert!(!sub_prompt.contains("Sub-answer:"));
    }

    #[test]
    fn decompose_two_shot_is_independent_of_config_shots() {
        let backend = scripted(vec![
            rule(SUMMARIZE, &["S."]),
            rule(DECOMPOSE, &["Sub?"]),
            rule(SUB_QA, &["The answer is X."]),
            rule(MAIN_QA, &["The answer is X."]),
        ]);
        let mut config = ReaderConfig::default();
        config.mode = ReaderMode::TtqaRs;
        config.shots = 0;
        let trace = run_with(backend, config);
        let decompose_prompt = &trace.prompts["decompose"];
        assert!(decompose_prompt.contains("Gatorade"));
        assert!(decompose_prompt.contains("sub-Saharan"));
        // Zero-shot QA prompts: no exemplar blocks.
        assert!(!trace.prompts["main_qa"].contains("Gatorade"));
    }

    #[test]
    fn failed_summarize_degrades_and_run_continues() {
        let backend = scripted(vec![
            fail_rule(SUMMARIZE),
            rule(DECOMPOSE, &["Sub?"]),
            rule(SUB_QA, &["The answer is X."]),
            rule(MAIN_QA, &["The answer is Y."]),
        ]);
        let mut config = ReaderConfig::default();
        config.mode = ReaderMode::TtqaRs;
        let trace = run_with(backend, config);
        assert!(trace.failed_stage.is_none());
        assert_eq!(trace.summary, "");
        assert_eq!(trace.final_answer, "Y");
        assert!(trace.fallbacks.iter().any(|f| f.contains("summarize failed")));
        // No summary line in downstream prompts.
        assert!(!trace.prompts["main_qa"].contains("Summary:"));
    }

    #[test]
    fn blank_decomposition_falls_back_to_the_question() {
        let backend = scripted(vec![
            rule(SUMMARIZE, &["S."]),
            rule(DECOMPOSE, &["   \n"]),
            rule(SUB_QA, &["The answer is X."]),
            rule(MAIN_QA, &["The answer is X."]),
        ]);
        let mut config = ReaderConfig::default();
        config.mode = ReaderMode::TtqaRs;
        let trace = run_with(backend, config);
        assert_eq!(trace.sub_question, "When was the game released ?");
        assert!(trace
            .fallbacks
            .iter()
            .any(|f| f.contains("decompose returned nothing")));
    }

    #[test]
    fn failed_final_stage_fails_the_question() {
        let backend = scripted(vec![fail_rule(MAIN_QA)]);
        let trace = run_with(backend, ReaderConfig::default());
        assert_eq!(trace.failed_stage, Some(Stage::MainQa));
        assert_eq!(trace.final_answer, "");
    }

    #[test]
    fn self_consistency_votes_across_samples() {
        let backend = scripted(vec![rule(
            MAIN_QA,
            &[
                "The answer is Paris.",
                "The answer is London.",
                "The answer is paris",
            ],
        )]);
        let mut config = ReaderConfig::default();
        config.self_consistency_samples = 3;
        let trace = run_with(backend, config);
        assert_eq!(trace.final_answer, "Paris");
        assert_eq!(trace.votes["Paris"], 2);
        assert_eq!(trace.votes["London"], 1);
        assert_eq!(trace.completions["main_qa"].len(), 3);
    }

    #[test]
    fn prompts_nest_as_subsequences_across_modes() {
        let mk = || {
            scripted(vec![
                rule(SUMMARIZE, &["S."]),
                rule(DECOMPOSE, &["Sub?"]),
                rule(SUB_QA, &["The answer is X."]),
                rule(MAIN_QA, &["The answer is X."]),
            ])
        };
        let mut prompts = BTreeMap::new();
        for mode in [ReaderMode::Standard, ReaderMode::Cot, ReaderMode::TtqaRs] {
            let mut config = ReaderConfig::default();
            config.mode = mode;
            let trace = run_with(mk(), config);
            assert!(trace.failed_stage.is_none());
            prompts.insert(mode.name(), trace.prompts["main_qa"].clone());
        }
        assert!(
            is_subsequence(&prompts["standard"], &prompts["cot"]),
            "standard prompt must embed into cot prompt"
        );
        assert!(
            is_subsequence(&prompts["cot"], &prompts["ttqa_rs"]),
            "cot prompt must embed into staged prompt"
        );
    }

    #[test]
    fn config_validation_rejects_bad_settings() {
        let shots = ShotSet::builtin();
        let ok = ReaderConfig::default();
        assert!(ok.validate(&shots).is_ok());
        let mut c = ReaderConfig::default();
        c.self_consistency_samples = 0;
        assert!(c.validate(&shots).is_err());
        c.self_consistency_samples = 4;
        assert!(c.validate(&shots).is_err());
        c.self_consistency_samples = 5;
        assert!(c.validate(&shots).is_ok());
        let mut c = ReaderConfig::default();
        c.shots = 99;
        assert!(c.validate(&shots).is_err());
        let mut c = ReaderConfig::default();
        c.temperature = -0.1;
        assert!(c.validate(&shots).is_err());
    }

    #[test]
    fn parse_sub_question_strips_echoed_label() {
        assert_eq!(
            parse_sub_question("Sub-question: What is the hometown ?\nextra"),
            "What is the hometown ?"
        );
        assert_eq!(parse_sub_question("\n  What is X ?  \n"), "What is X ?");
        assert_eq!(parse_sub_question(""), "");
    }

    #[test]
    fn trace_round_trips_through_json() {
        let backend = scripted(vec![rule(MAIN_QA, &["The answer is 16 March 2010."])]);
        let trace = run_with(backend, ReaderConfig::default());
        let json = serde_json::to_string(&trace).unwrap();
        let back: ReaderTrace = serde_json::from_str(&json).unwrap();
        assert_eq!(back.question_id, trace.question_id);
        assert_eq!(back.final_answer, trace.final_answer);
        assert_eq!(back.mode, trace.mode);
        assert!(back.failed_stage.is_none());
    }
}
