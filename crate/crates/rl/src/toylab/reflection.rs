use serde::{Deserialize, Serialize};

use super::ToyError;

pub const DEFAULT_LEXICON: [&str; 6] = ["let", "wait", "think", "check", "verify", "hmm"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReflectionStats {
    pub ratio: f64,
    pub words: usize,
    pub hits: usize,
    /// No words at all; `ratio` is then 0.
    pub empty: bool,
}

fn strip_tags(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut depth = false;
    for c in text.chars() {
        match c {
            '<' => {
                depth = true;
                out.push(' ');
            }
            '>' if depth => depth = false,
            _ if !depth => out.push(c),
            _ => {}
        }
    }
    out
}

/// Share of words that belong to `lexicon`, case-insensitive, whole words.
/// Markup tags are ignored.
pub fn reflection_ratio<S: AsRef<str>>(texts: &[S], lexicon: &[&str]) -> Result<ReflectionStats, ToyError> {
    if lexicon.is_empty() {
        return Err(ToyError::EmptyLexicon);
    }
    let lex: Vec<String> = lexicon.iter().map(|w| w.to_lowercase()).collect();
    let (mut words, mut hits) = (0, 0);
    for t in texts {
        for w in strip_tags(t.as_ref()).split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            words += 1;
            if lex.iter().any(|l| *l == w.to_lowercase()) {
                hits += 1;
            }
        }
    }
    let ratio = if words == 0 { 0.0 } else { hits as f64 / words as f64 };
    Ok(ReflectionStats { ratio, words, hits, empty: words == 0 })
}
