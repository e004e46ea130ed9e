use std::collections::BTreeMap;
use std::ops::Range;

use super::{CorpusError, DatasetManifest, Sample, Stage, META_ANSWER_ALIAS};
use crate::verify::{canonicalize_answer, AnswerKind};

/// Result of scanning a body for `<think>` and `<answer>` blocks.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TaggedAnswer {
    /// Trimmed byte range of the first well-formed think block's content.
    pub think: Option<Range<usize>>,
    /// Trimmed byte range of the first well-formed answer block's content.
    pub answer: Option<Range<usize>>,
    /// Number of `<answer>` opening tags in the body.
    pub answer_tags: usize,
}

impl TaggedAnswer {
    pub fn think_text<'a>(&self, body: &'a str) -> Option<&'a str> {
        self.think.clone().map(|r| &body[r])
    }

    pub fn answer_text<'a>(&self, body: &'a str) -> Option<&'a str> {
        self.answer.clone().map(|r| &body[r])
    }

    pub fn multiple_answers(&self) -> bool {
        self.answer_tags > 1
    }
}

/// Content range of the first `open…close` pair, requiring no nested `open`.
fn first_block(body: &str, open: &str, close: &str) -> Option<Range<usize>> {
    let start = body.find(open)? + open.len();
    let end = start + body[start..].find(close)?;
    let inner = &body[start..end];
    if inner.contains(open) {
        return None;
    }
    let lead = inner.len() - inner.trim_start().len();
    let trail = inner.len() - inner.trim_end().len();
    Some(start + lead..end - trail)
}

/// Extracts the first `<think>` and `<answer>` contents. A repeated answer
/// block resolves to the first occurrence; `answer_tags` records the count.
pub fn extract_tagged_answer(body: &str) -> TaggedAnswer {
    TaggedAnswer {
        think: first_block(body, "<think>", "</think>"),
        answer: first_block(body, "<answer>", "</answer>"),
        answer_tags: body.matches("<answer>").count(),
    }
}

/// Collapses every whitespace run (including CR/LF) to one space.
pub fn normalize_question(q: &str) -> String {
    q.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn normalize_sample(s: &Sample) -> Sample {
    let mut out = s.clone();
    out.question = normalize_question(&s.question);
    let gold = normalize_question(&s.gold_answer);
    match canonicalize_answer(&gold) {
        Ok(form) if form.kind == AnswerKind::ChoiceLetter => {
            let letter = form.choice.expect("choice letter");
            out.gold_answer = letter.to_string();
            if let Some(alias_end) = alias_text(&gold) {
                out.meta.insert(META_ANSWER_ALIAS.into(), alias_end);
            }
        }
        _ => out.gold_answer = gold,
    }
    out
}

/// The literal option content after "B." / "(B)" / "B:" prefixes.
fn alias_text(gold: &str) -> Option<String> {
    let t = gold.trim_start_matches('(');
    let mut chars = t.chars();
    chars.next()?;
    let rest = chars.as_str().trim_start_matches(')');
    let rest = rest.trim_start();
    let rest = rest
        .strip_prefix('.')
        .or_else(|| rest.strip_prefix(':'))
        .or_else(|| rest.strip_prefix('：'))
        .unwrap_or(rest)
        .trim();
    (!rest.is_empty()).then(|| rest.to_string())
}

/// Normalizes question whitespace and gold answers. Choice-letter golds keep
/// only the letter; the option content moves to meta `answer_alias`.
pub fn normalize_format(m: &DatasetManifest) -> Result<DatasetManifest, CorpusError> {
    if m.stage > Stage::Formatted {
        return Err(CorpusError::StageRegression { from: m.stage, to: Stage::Formatted });
    }
    let records: Vec<Sample> = m.records.iter().map(normalize_sample).collect();
    if m.stage == Stage::Formatted && records == m.records {
        return Ok(m.clone());
    }
    let changed = records.iter().zip(&m.records).filter(|(a, b)| a != b).count();
    let mut tallies = BTreeMap::new();
    tallies.insert("changed".into(), changed as u64);
    m.derive(records, Stage::Formatted, "normalize_format", &serde_json::json!({}), tallies)
}
