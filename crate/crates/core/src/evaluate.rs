//! Answer normalization, the EM / token-F1 / HIT@k metrics, and report
//! assembly.
//!
//! Normalization follows the reading-comprehension convention: lowercase,
//! delete (ASCII) punctuation, drop the articles a/an/the, collapse
//! whitespace. Exact match compares normalized strings; token F1 compares
//! token multisets; HIT@k asks whether the gold answer literally occurs in
//! the text of any of the top-k retrieval units.

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::reader::ReaderTrace;
use crate::retrieve::RetrievalResult;
use crate::scalar::Scalar;
use crate::Real;
use serde::Serialize;
use std::collections::BTreeMap;

/// Canonical answer form: lowercase → strip punctuation → drop articles →
/// collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let no_punct: String = lowered
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    no_punct
        .split_whitespace()
        .filter(|tok| !matches!(*tok, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(prediction: &str, gold: &str) -> bool {
    normalize_answer(prediction) == normalize_answer(gold)
}

fn token_counts(s: &str) -> BTreeMap<&str, usize> {
    let mut counts = BTreeMap::new();
    for tok in s.split_whitespace() {
        *counts.entry(tok).or_insert(0) += 1;
    }
    counts
}

/// Token-multiset F1 over normalized answers. Both empty → 1, exactly one
/// empty → 0.
pub fn token_f1<T: Scalar>(prediction: &str, gold: &str) -> T {
    let pred = normalize_answer(prediction);
    let gold = normalize_answer(gold);
    let pred_counts = token_counts(&pred);
    let gold_counts = token_counts(&gold);
    let pred_total: usize = pred_counts.values().sum();
    let gold_total: usize = gold_counts.values().sum();
    if pred_total == 0 && gold_total == 0 {
        return T::one();
    }
    if pred_total == 0 || gold_total == 0 {
        return T::zero();
    }
    let overlap: usize = pred_counts
        .iter()
        .filter_map(|(tok, n)| gold_counts.get(tok).map(|m| n.min(m)))
        .sum();
    if overlap == 0 {
        return T::zero();
    }
    let precision = T::from_usize(overlap) / T::from_usize(pred_total);
    let recall = T::from_usize(overlap) / T::from_usize(gold_total);
    let two = T::from_usize(2);
    two * precision * recall / (precision + recall)
}

/// The text a rank-k retrieval "unit" exposes to HIT@k: the row sentence plus
/// the final passages that row pulled in, in retrieval order.
pub fn retrieval_units(retrieval: &RetrievalResult, corpus: &Corpus) -> Vec<String> {
    retrieval
        .rows
        .iter()
        .map(|row| {
            let mut unit = row.sentence.clone();
            for candidate in &retrieval.passages {
                if candidate.source_row_index == row.row_index {
                    if let Some(passage) = corpus.passage(&candidate.passage_id) {
                        unit.push(' ');
                        unit.push_str(&passage.text);
                    }
                }
            }
            unit
        })
        .collect()
}

fn contains_token_run(haystack: &str, needle: &str) -> bool {
    let h: Vec<&str> = haystack.split_whitespace().collect();
    let n: Vec<&str> = needle.split_whitespace().collect();
    if n.is_empty() || n.len() > h.len() {
        return false;
    }
    h.windows(n.len()).any(|w| w == n.as_slice())
}

/// True when the normalized gold answer occurs as a contiguous token run in
/// the normalized text of any of the top-k retrieval units. Gold answers that
/// normalize to nothing never hit.
pub fn hit_at_k(retrieval: &RetrievalResult, gold: &str, k: usize, corpus: &Corpus) -> bool {
    let gold = normalize_answer(gold);
    retrieval_units(retrieval, corpus)
        .iter()
        .take(k)
        .any(|unit| contains_token_run(&normalize_answer(unit), &gold))
}

/// Per-question evaluation row. `em` is 0/1 to keep report JSON numeric.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuestionResult {
    pub question_id: String,
    pub prediction: String,
    pub gold_answer: String,
    pub em: u8,
    pub f1: Real,
    pub hit1: bool,
    pub hit3: bool,
    /// Where to find the full trace: the question id in `traces.jsonl`.
    pub trace_ref: String,
}

/// Corpus-level means, as percentages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregates {
    pub em: Real,
    pub f1: Real,
    pub hit1: Real,
    pub hit3: Real,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub corpus_name: String,
    pub split: String,
    /// Snapshot of the semantic run configuration (retriever, reader,
    /// backend ids, template hashes). Execution knobs are deliberately
    /// excluded so reports from equivalent runs are byte-identical.
    pub config: serde_json::Value,
    pub aggregates: Aggregates,
    /// Failed questions by stage name.
    pub failures: BTreeMap<String, u64>,
    pub failed_question_ids: Vec<String>,
    pub per_question: Vec<QuestionResult>,
}

/// Score a run from its traces and retrievals. Questions whose trace records
/// a failed stage are excluded from the aggregates and listed separately;
/// every non-failed trace must have a matching retrieval and vice versa.
pub fn evaluate_run(
    traces: &[ReaderTrace],
    retrievals: &[RetrievalResult],
    corpus: &Corpus,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let mut retrieval_by_id: BTreeMap<&str, &RetrievalResult> = BTreeMap::new();
    for r in retrievals {
        if retrieval_by_id.insert(&r.question_id, r).is_some() {
            return Err(Error::InvalidRequest(format!(
                "duplicate retrieval for question {}",
                r.question_id
            )));
        }
    }

    let mut failures: BTreeMap<String, u64> = BTreeMap::new();
    let mut failed_question_ids = Vec::new();
    let mut per_question = Vec::new();
    let mut missing = Vec::new();
    let mut seen_traces: Vec<&str> = Vec::new();

    for trace in traces {
        seen_traces.push(&trace.question_id);
        if let Some(stage) = trace.failed_stage {
            *failures.entry(stage.name().to_string()).or_insert(0) += 1;
            failed_question_ids.push(trace.question_id.clone());
            continue;
        }
        let Some(retrieval) = retrieval_by_id.get(trace.question_id.as_str()) else {
            missing.push(trace.question_id.clone());
            continue;
        };
        let question = corpus.question(&trace.question_id)?;
        let prediction = trace.final_answer.as_str();
        per_question.push(QuestionResult {
            question_id: trace.question_id.clone(),
            prediction: prediction.to_string(),
            gold_answer: question.gold_answer.clone(),
            em: exact_match(prediction, &question.gold_answer) as u8,
            f1: token_f1::<Real>(prediction, &question.gold_answer),
            hit1: hit_at_k(retrieval, &question.gold_answer, 1, corpus),
            hit3: hit_at_k(retrieval, &question.gold_answer, 3, corpus),
            trace_ref: trace.question_id.clone(),
        });
    }

    // Retrievals without traces are runs that stopped mid-question.
    for id in retrieval_by_id.keys() {
        if !seen_traces.contains(id) {
            missing.push(id.to_string());
        }
    }
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(Error::MissingTrace {
            question_ids: missing,
        });
    }
    if per_question.is_empty() && failures.is_empty() {
        return Err(Error::EmptyRun);
    }

    per_question.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    failed_question_ids.sort();

    let n = per_question.len();
    let mean = |f: &dyn Fn(&QuestionResult) -> Real| -> Real {
        if n == 0 {
            0.0
        } else {
            per_question.iter().map(|q| f(q)).sum::<Real>() / n as Real * 100.0
        }
    };
    let aggregates = Aggregates {
        em: mean(&|q| q.em as Real),
        f1: mean(&|q| q.f1),
        hit1: mean(&|q| q.hit1 as u8 as Real),
        hit3: mean(&|q| q.hit3 as u8 as Real),
    };

    // Splits of the questions actually evaluated; "mixed" when they differ.
    let mut splits: Vec<String> = per_question
        .iter()
        .filter_map(|q| corpus.question(&q.question_id).ok())
        .map(|q| q.split.to_string())
        .collect();
    splits.sort();
    splits.dedup();
    let split = match splits.len() {
        0 => "none".to_string(),
        1 => splits.pop().unwrap(),
        _ => "mixed".to_string(),
    };

    Ok(EvalReport {
        corpus_name: corpus.name.clone(),
        split,
        config,
        aggregates,
        failures,
        failed_question_ids,
        per_question,
    })
}

/// The one-line summary every run prints.
pub fn aggregate_line(a: &Aggregates) -> String {
    format!(
        "EM {:.2} / F1 {:.2} / HIT@1 {:.2} / HIT@3 {:.2}",
        a.em, a.f1, a.hit1, a.hit3
    )
}

pub fn render_report_text(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "corpus {} (split {}) — {} questions evaluated",
        report.corpus_name,
        report.split,
        report.per_question.len()
    ));
    if !report.failed_question_ids.is_empty() {
        out.push_str(&format!(", {} failed", report.failed_question_ids.len()));
    }
    out.push('\n');
    out.push_str(&aggregate_line(&report.aggregates));
    out.push('\n');
    if !report.failures.is_empty() {
        out.push_str("failures by stage:\n");
        for (stage, count) in &report.failures {
            out.push_str(&format!("  {stage}: {count}\n"));
        }
    }
    out.push('\n');
    out.push_str(&format!(
        "{:<24} {:>4} {:>8} {:>6} {:>6}\n",
        "question", "em", "f1", "hit@1", "hit@3"
    ));
    for q in &report.per_question {
        out.push_str(&format!(
            "{:<24} {:>4} {:>8.4} {:>6} {:>6}\n",
            q.question_id, q.em, q.f1, q.hit1 as u8, q.hit3 as u8
        ));
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub em: Real,
    pub f1: Real,
    pub hit1: Real,
    pub hit3: Real,
    /// Differences against the first (baseline) row.
    pub delta_em: Real,
    pub delta_f1: Real,
    pub delta_hit1: Real,
    pub delta_hit3: Real,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub corpus_name: String,
    pub split: String,
    pub rows: Vec<AblationRow>,
}

/// Side-by-side aggregates for labeled runs over the same corpus and split.
/// The first report is the baseline the deltas are measured against.
pub fn compare_ablations(reports: &[(String, &EvalReport)]) -> Result<AblationTable> {
    let Some(((_, first), rest)) = reports.split_first() else {
        return Err(Error::InvalidRequest("no reports to compare".into()));
    };
    for (_, report) in rest {
        if report.corpus_name != first.corpus_name || report.split != first.split {
            return Err(Error::MismatchedCorpus {
                expected: format!("{}/{}", first.corpus_name, first.split),
                actual: format!("{}/{}", report.corpus_name, report.split),
            });
        }
    }
    let base = first.aggregates;
    let rows = reports
        .iter()
        .map(|(label, report)| {
            let a = report.aggregates;
            AblationRow {
                label: label.clone(),
                em: a.em,
                f1: a.f1,
                hit1: a.hit1,
                hit3: a.hit3,
                delta_em: a.em - base.em,
                delta_f1: a.f1 - base.f1,
                delta_hit1: a.hit1 - base.hit1,
                delta_hit3: a.hit3 - base.hit3,
            }
        })
        .collect();
    Ok(AblationTable {
        corpus_name: first.corpus_name.clone(),
        split: first.split.clone(),
        rows,
    })
}

pub fn render_ablation_text(table: &AblationTable) -> String {
    let mut out = format!(
        "ablations on {} (split {})\n{:<28} {:>7} {:>7} {:>7} {:>7} {:>8} {:>8}\n",
        table.corpus_name, table.split, "label", "em", "f1", "hit@1", "hit@3", "d_em", "d_f1"
    );
    for row in &table.rows {
        out.push_str(&format!(
            "{:<28} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>+8.2} {:>+8.2}\n",
            row.label, row.em, row.f1, row.hit1, row.hit3, row.delta_em, row.delta_f1
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Cell, Passage, Question, Split, Table};
    use crate::retrieve::{PassageCandidate, RowCandidate};
    use proptest::prelude::*;

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_answer("The Answer!"), "answer");
        assert_eq!(normalize_answer("a  an the"), "");
        assert_eq!(normalize_answer("U.S. Open"), "us open");
        assert_eq!(normalize_answer("Over-the-air"), "overtheair");
        assert_eq!(normalize_answer("  12,500.  "), "12500");
    }

    #[test]
    fn exact_match_examples() {
        assert!(exact_match("The Cradle.", "the cradle"));
        assert!(exact_match("16 March 2010", "16 march 2010"));
        assert!(!exact_match("March 2010", "16 March 2010"));
        assert!(exact_match("", ""));
    }

    // Hand-derived F1 table. Shared with the acceptance suite, which extends
    // it; values here are the exact rationals of each case.
    #[test]
    fn token_f1_examples() {
        let cases: &[(&str, &str, Real)] = &[
            ("March 2010", "16 March 2010", 0.8),
            ("Xie Jin", "Jin", 2.0 / 3.0),
            ("New York City", "New York", 0.8),
            ("", "x", 0.0),
            ("x", "", 0.0),
            ("", "", 1.0),
            ("b b a", "b", 2.0 / 3.0),
            ("the answer is paris", "Paris", 0.5),
        ];
        for (pred, gold, want) in cases {
            let got = token_f1::<Real>(pred, gold);
            assert!(
                (got - want).abs() < 1e-9,
                "f1({pred:?}, {gold:?}) = {got}, want {want}"
            );
        }
    }

    #[test]
    fn f1_works_at_f32_precision_too() {
        let got = token_f1::<f32>("March 2010", "16 March 2010");
        assert!((got - 0.8f32).abs() < 1e-6);
    }

    fn fixture() -> (Corpus, RetrievalResult) {
        let table = Table {
            id: "t1".into(),
            page_title: "P".into(),
            section_title: String::new(),
            headers: vec!["Game".into(), "Commentator".into()],
            rows: vec![
                vec![Cell::text("Rugby League 3"), Cell::text("Andrew Voss")],
                vec![Cell::text("Other Game"), Cell::text("Someone Else")],
            ],
        };
        let passage = Passage {
            id: "p1".into(),
            title: "Rugby League 3".into(),
            text: "Rugby League 3 was released on 16 March 2010.".into(),
        };
        let question = Question {
            id: "q1".into(),
            text: "When was the game released ?".into(),
            gold_answer: "16 March 2010".into(),
            table_id: "t1".into(),
            split: Split::Dev,
        };
        let corpus = Corpus {
            name: "fixture".into(),
            tables: [("t1".to_string(), table)].into(),
            passages: [("p1".to_string(), passage)].into(),
            questions: vec![question],
        };
        let retrieval = RetrievalResult {
            question_id: "q1".into(),
            rows: vec![
                RowCandidate {
                    table_id: "t1".into(),
                    row_index: 0,
                    sentence: "Game is Rugby League 3; Commentator is Andrew Voss.".into(),
                    score: 0.9,
                },
                RowCandidate {
                    table_id: "t1".into(),
                    row_index: 1,
                    sentence: "Game is Other Game; Commentator is Someone Else.".into(),
                    score: 0.1,
                },
            ],
            passages: vec![PassageCandidate {
                passage_id: "p1".into(),
                score: 1.0,
                source_row_index: 0,
            }],
            intermediate_passages: vec![],
            keywords: vec![],
        };
        (corpus, retrieval)
    }

    #[test]
    fn hit_finds_gold_in_linked_passage() {
        let (corpus, retrieval) = fixture();
        assert!(hit_at_k(&retrieval, "16 March 2010", 1, &corpus));
        assert!(hit_at_k(&retrieval, "16 March 2010", 3, &corpus));
        // Gold in the row sentence itself also counts.
        assert!(hit_at_k(&retrieval, "Andrew Voss", 1, &corpus));
    }

    #[test]
    fn hit_requires_contiguous_tokens() {
        let (corpus, retrieval) = fixture();
        // Both tokens occur in unit 1, but never adjacent in this order.
        assert!(!hit_at_k(&retrieval, "2010 Rugby", 3, &corpus));
        assert!(!hit_at_k(&retrieval, "17 March 2010", 3, &corpus));
    }

    #[test]
    fn hit_respects_k_and_unit_order() {
        let (corpus, mut retrieval) = fixture();
        // Move the gold-bearing passage to the second-ranked row.
        retrieval.rows.swap(0, 1);
        assert!(!hit_at_k(&retrieval, "16 March 2010", 1, &corpus));
        assert!(hit_at_k(&retrieval, "16 March 2010", 3, &corpus));
    }

    #[test]
    fn empty_gold_never_hits() {
        let (corpus, retrieval) = fixture();
        assert!(!hit_at_k(&retrieval, "", 3, &corpus));
        assert!(!hit_at_k(&retrieval, "the", 3, &corpus));
    }

    fn ok_trace(id: &str, answer: &str) -> ReaderTrace {
        ReaderTrace {
            question_id: id.into(),
            final_answer: answer.into(),
            ..ReaderTrace::empty(id)
        }
    }

    #[test]
    fn evaluate_run_scores_and_sorts() {
        let (corpus, retrieval) = fixture();
        let traces = vec![ok_trace("q1", "16 March 2010")];
        let report =
            evaluate_run(&traces, &[retrieval], &corpus, serde_json::json!({})).unwrap();
        assert_eq!(report.per_question.len(), 1);
        assert_eq!(report.per_question[0].em, 1);
        assert_eq!(report.aggregates.em, 100.0);
        assert_eq!(report.aggregates.f1, 100.0);
        assert_eq!(report.split, "dev");
        assert!(report.failures.is_empty());
    }

    #[test]
    fn evaluate_run_excludes_failed_questions_from_aggregates() {
        let (mut corpus, retrieval) = fixture();
        corpus.questions.push(Question {
            id: "q2".into(),
            text: "Doomed ?".into(),
            gold_answer: "nope".into(),
            table_id: "t1".into(),
            split: Split::Dev,
        });
        let mut failed = ReaderTrace::empty("q2");
        failed.failed_stage = Some(crate::Stage::MainQa);
        let traces = vec![ok_trace("q1", "wrong answer"), failed];
        let report =
            evaluate_run(&traces, &[retrieval], &corpus, serde_json::json!({})).unwrap();
        assert_eq!(report.per_question.len(), 1);
        assert_eq!(report.failures["main_qa"], 1);
        assert_eq!(report.failed_question_ids, vec!["q2"]);
        assert_eq!(report.aggregates.em, 0.0);
    }

    #[test]
    fn evaluate_run_rejects_orphans_and_empty() {
        let (corpus, retrieval) = fixture();
        // Trace without retrieval.
        let err = evaluate_run(
            &[ok_trace("q1", "x")],
            &[],
            &corpus,
            serde_json::json!({}),
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingTrace { .. }));
        // Retrieval without trace.
        let err =
            evaluate_run(&[], &[retrieval], &corpus, serde_json::json!({})).unwrap_err();
        assert!(matches!(err, Error::MissingTrace { .. }));
        // Nothing at all.
        let err = evaluate_run(&[], &[], &corpus, serde_json::json!({})).unwrap_err();
        assert!(matches!(err, Error::EmptyRun));
    }

    fn report_with(em: Real, name: &str, split: &str) -> EvalReport {
        EvalReport {
            corpus_name: name.into(),
            split: split.into(),
            config: serde_json::json!({}),
            aggregates: Aggregates {
                em,
                f1: em,
                hit1: 50.0,
                hit3: 80.0,
            },
            failures: BTreeMap::new(),
            failed_question_ids: vec![],
            per_question: vec![],
        }
    }

    #[test]
    fn ablation_deltas_are_against_the_first_report() {
        let base = report_with(40.0, "c", "dev");
        let better = report_with(55.0, "c", "dev");
        let table = compare_ablations(&[
            ("baseline".to_string(), &base),
            ("variant".to_string(), &better),
        ])
        .unwrap();
        assert_eq!(table.rows[0].delta_em, 0.0);
        assert_eq!(table.rows[1].delta_em, 15.0);
        let text = render_ablation_text(&table);
        assert!(text.contains("variant"), "{text}");
    }

    #[test]
    fn ablations_refuse_mismatched_corpora() {
        let a = report_with(40.0, "c1", "dev");
        let b = report_with(41.0, "c2", "dev");
        assert!(matches!(
            compare_ablations(&[("a".to_string(), &a), ("b".to_string(), &b)]),
            Err(Error::MismatchedCorpus { .. })
        ));
        let c = report_with(41.0, "c1", "train");
        assert!(compare_ablations(&[("a".to_string(), &a), ("c".to_string(), &c)]).is_err());
    }

    #[test]
    fn aggregate_line_format() {
        let a = Aggregates {
            em: 100.0,
            f1: 100.0,
            hit1: 50.0,
            hit3: 83.333333,
        };
        assert_eq!(
            aggregate_line(&a),
            "EM 100.00 / F1 100.00 / HIT@1 50.00 / HIT@3 83.33"
        );
    }

    proptest! {
        #[test]
        fn em_implies_perfect_f1(s in ".{0,24}", t in ".{0,24}") {
            if exact_match(&s, &t) {
                let f1 = token_f1::<Real>(&s, &t);
                prop_assert!((f1 - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn f1_is_symmetric(s in ".{0,24}", t in ".{0,24}") {
            let a = token_f1::<Real>(&s, &t);
            let b = token_f1::<Real>(&t, &s);
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn f1_is_bounded(s in ".{0,24}", t in ".{0,24}") {
            let f1 = token_f1::<Real>(&s, &t);
            prop_assert!((0.0..=1.0).contains(&f1));
        }

        #[test]
        fn hit_is_monotone_in_k(gold in "[a-z ]{1,12}") {
            let (corpus, retrieval) = fixture();
            let h1 = hit_at_k(&retrieval, &gold, 1, &corpus);
            let h3 = hit_at_k(&retrieval, &gold, 3, &corpus);
            prop_assert!(!h1 || h3, "hit@1 implies hit@3");
        }
    }
}
