use omr_core::corpus::extract_tagged_answer;
use omr_core::verify::Verifier;
use serde::{Deserialize, Serialize};

use super::RlError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub lambda_fmt: f64,
    pub l_max: usize,
    /// Width of the soft zone below `l_max` where the penalty ramps down.
    pub l_cache: usize,
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec { lambda_fmt: 0.1, l_max: 28_696 + 4_096, l_cache: 4_096 }
    }
}

impl RewardSpec {
    pub fn validate(&self) -> Result<(), RlError> {
        if !(0.0..=1.0).contains(&self.lambda_fmt) {
            return Err(RlError::BadSpec(format!("lambda_fmt {} outside [0, 1]", self.lambda_fmt)));
        }
        if !(0 < self.l_cache && self.l_cache < self.l_max) {
            return Err(RlError::BadSpec(format!("need 0 < l_cache ({}) < l_max ({})", self.l_cache, self.l_max)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardParts {
    pub r: f64,
    pub acc: f64,
    pub fmt: f64,
}

/// Exactly one think block followed by exactly one answer block, with only
/// whitespace around and between them.
pub fn format_ok(text: &str) -> bool {
    const TAGS: [&str; 4] = ["<think>", "</think>", "<answer>", "</answer>"];
    if TAGS.iter().any(|t| text.matches(t).count() != 1) {
        return false;
    }
    let pos: Vec<usize> = TAGS.iter().map(|t| text.find(t).expect("counted")).collect();
    if !(pos[0] < pos[1] && pos[1] < pos[2] && pos[2] < pos[3]) {
        return false;
    }
    let blank = |s: &str| s.trim().is_empty();
    blank(&text[..pos[0]]) && blank(&text[pos[1] + TAGS[1].len()..pos[2]]) && blank(&text[pos[3] + TAGS[3].len()..])
}

/// `(1 − λ)·acc + λ·fmt`, written so the corners land exactly on 0, λ,
/// 1 − λ and 1.
pub fn reward_from_parts(acc: f64, fmt: f64, lambda_fmt: f64) -> f64 {
    acc + lambda_fmt * (fmt - acc)
}

/// `R = (1 − λ)·R_acc + λ·R_fmt`, where `R_acc` comes from two-stage
/// verification of the first answer block.
pub fn composite_reward(
    response_text: &str,
    question: &str,
    gold: &str,
    spec: &RewardSpec,
    verifier: &Verifier,
) -> Result<RewardParts, RlError> {
    spec.validate()?;
    let fmt = if format_ok(response_text) { 1.0 } else { 0.0 };
    let tags = extract_tagged_answer(response_text);
    let acc = match tags.answer_text(response_text) {
        Some(ans) if verifier.two_stage_verify(question, ans, gold)?.equivalent => 1.0,
        _ => 0.0,
    };
    Ok(RewardParts { r: reward_from_parts(acc, fmt, spec.lambda_fmt), acc, fmt })
}

/// 0 up to `l_max − l_cache`, linear down to −1 at `l_max`, −1 beyond.
pub fn overlength_penalty(length: usize, spec: &RewardSpec) -> f64 {
    let soft = spec.l_max - spec.l_cache;
    if length <= soft {
        0.0
    } else if length <= spec.l_max {
        (soft as f64 - length as f64) / spec.l_cache as f64
    } else {
        -1.0
    }
}
