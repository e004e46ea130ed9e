//! Built-in deterministic tokenizer.
//!
//! Text is split on whitespace, punctuation characters become their own
//! pieces and the reasoning tags are kept whole. A piece found in the fixed
//! vocabulary maps to one id; anything else falls back to one id per UTF-8
//! byte. Ids `0..256` are the byte ids, vocabulary ids start at 256.

use std::collections::HashMap;
use std::sync::OnceLock;

pub type TokenId = u32;

const BYTE_IDS: u32 = 256;

const TAGS: [&str; 4] = ["<think>", "</think>", "<answer>", "</answer>"];

const WORDS: &[&str] = &[
    "<think>", "</think>", "<answer>", "</answer>", "the", "a", "an", "of", "to", "and", "is",
    "in", "that", "it", "for", "on", "with", "as", "are", "be", "this", "what", "which", "how",
    "many", "so", "then", "if", "we", "let", "wait", "think", "check", "verify", "hmm", "answer",
    "question", "image", "figure", "number", "value", "total", "sum", "area", "angle", "line",
    "point", "triangle", "circle", "equal", "equals", "therefore", "because", "first", "next",
    "step", "option", "options", "correct", "from", "by", "at", "or", "not", "there", "x", "y",
    "A", "B", "C", "D", "E", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "10", "+", "-",
    "*", "/", "=", "(", ")", ".", ",", "?", ":", "%", "$",
];

fn vocab() -> &'static HashMap<&'static str, TokenId> {
    static VOCAB: OnceLock<HashMap<&'static str, TokenId>> = OnceLock::new();
    VOCAB.get_or_init(|| {
        WORDS
            .iter()
            .enumerate()
            .map(|(i, w)| (*w, BYTE_IDS + i as u32))
            .collect()
    })
}

/// Size of the id space (byte ids plus vocabulary).
pub fn vocab_size() -> usize {
    BYTE_IDS as usize + WORDS.len()
}

fn pieces(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut rest = chunk;
        while !rest.is_empty() {
            if let Some(tag) = TAGS.iter().find(|t| rest.starts_with(**t)) {
                out.push(&rest[..tag.len()]);
                rest = &rest[tag.len()..];
                continue;
            }
            let first = rest.chars().next().expect("non-empty");
            if first.is_ascii_punctuation() {
                let n = first.len_utf8();
                out.push(&rest[..n]);
                rest = &rest[n..];
                continue;
            }
            let end = rest
                .char_indices()
                .find(|&(i, c)| i > 0 && (c.is_ascii_punctuation()))
                .map(|(i, _)| i)
                .unwrap_or(rest.len());
            out.push(&rest[..end]);
            rest = &rest[end..];
        }
    }
    out
}

pub fn encode(text: &str) -> Vec<TokenId> {
    let v = vocab();
    let mut ids = Vec::new();
    for p in pieces(text) {
        match v.get(p) {
            Some(&id) => ids.push(id),
            None => ids.extend(p.bytes().map(u32::from)),
        }
    }
    ids
}

pub fn count_tokens(text: &str) -> usize {
    let v = vocab();
    pieces(text)
        .into_iter()
        .map(|p| if v.contains_key(p) { 1 } else { p.len() })
        .sum()
}
