//! Pulling a short answer out of a free-form completion, and voting across
//! self-consistency samples.

use crate::evaluate::normalize_answer;
use std::collections::BTreeMap;

/// Trim an extracted span down to the bare answer: trailing sentence
/// punctuation off, surrounding quotes off, repeated until stable so that
/// forms like `"The Cradle".` unwrap fully.
fn clean_span(s: &str) -> String {
    let mut cur = s.trim().to_string();
    loop {
        let before = cur.clone();
        while cur.ends_with(['.', '!', '?', ',']) {
            cur.pop();
        }
        cur = cur.trim().to_string();
        for (open, close) in [('"', '"'), ('\'', '\''), ('\u{201c}', '\u{201d}')] {
            if cur.chars().count() >= 2 && cur.starts_with(open) && cur.ends_with(close) {
                cur = cur[open.len_utf8()..cur.len() - close.len_utf8()]
                    .trim()
                    .to_string();
            }
        }
        if cur == before {
            break;
        }
    }
    cur
}

/// Extract the answer from a completion. The last "answer is" / "Answer:"
/// marker wins and the answer runs to the end of that line; without a marker
/// the last non-empty line is taken whole.
pub fn parse_answer(completion: &str) -> String {
    // ASCII lowering keeps byte offsets aligned with `completion`.
    let lower = completion.to_ascii_lowercase();
    let marker = ["answer is", "answer:"]
        .iter()
        .filter_map(|m| lower.rfind(m).map(|at| at + m.len()))
        .max();
    if let Some(start) = marker {
        // "The answer is: Paris" — the colon belongs to the marker.
        let rest = completion[start..].trim_start_matches([':', ' ']);
        let line = rest.lines().next().unwrap_or("");
        let cleaned = clean_span(line);
        if !cleaned.is_empty() {
            return cleaned;
        }
        // Marker at end of line ("The answer is:\nParis") — fall through to
        // whatever text follows it.
        if let Some(next) = rest.lines().map(clean_span).find(|l| !l.is_empty()) {
            return next;
        }
        return String::new();
    }
    completion
        .lines()
        .rev()
        .map(clean_span)
        .find(|line| !line.is_empty())
        .unwrap_or_default()
}

/// Majority vote over answer strings. Answers are grouped by normalized
/// form; each group is represented by its first-seen surface form. Ties go
/// to the group that appeared first. Returns the winner and the vote tally.
pub fn majority_vote(answers: &[String]) -> (String, BTreeMap<String, u64>) {
    // (representative, count), in first-appearance order.
    let mut groups: Vec<(String, u64)> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for answer in answers {
        let key = normalize_answer(answer);
        match index.get(&key) {
            Some(&i) => groups[i].1 += 1,
            None => {
                index.insert(key, groups.len());
                groups.push((answer.clone(), 1));
            }
        }
    }
    // `find` on the max count, not `max_by_key`: the latter keeps the last
    // maximum and ties must go to the earliest group.
    let best = groups.iter().map(|(_, c)| *c).max().unwrap_or(0);
    let winner = groups
        .iter()
        .find(|(_, c)| *c == best)
        .map(|(r, _)| r.clone())
        .unwrap_or_default();
    let votes = groups.into_iter().collect();
    (winner, votes)
}
