use std::sync::Arc;

use crate::client::{complete_with_retry, ChatClient, ChatMessage, ChatRequest, RetryPolicy};

use super::{Verdict, VerdictStage, VerifyError};

/// Shipped judge prompt; `{question}`, `{gold}` and `{pred}` are substituted.
pub const DEFAULT_JUDGE_TEMPLATE: &str = include_str!("../../assets/judge_prompt.md");

const REPROMPT: &str = "Reply with exactly one word: YES or NO.";

/// LLM-as-judge fallback.
pub struct Judge {
    client: Arc<dyn ChatClient>,
    model: String,
    template: String,
    pub retry: RetryPolicy,
}

impl Judge {
    pub fn new(client: Arc<dyn ChatClient>, model: impl Into<String>) -> Self {
        Judge {
            client,
            model: model.into(),
            template: DEFAULT_JUDGE_TEMPLATE.to_string(),
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_template(mut self, template: impl Into<String>) -> Self {
        self.template = template.into();
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// The exact request sent for a (question, pred, gold) triple.
    pub fn request(&self, question: &str, pred: &str, gold: &str) -> ChatRequest {
        let prompt = self
            .template
            .replace("{question}", question)
            .replace("{gold}", gold)
            .replace("{pred}", pred);
        ChatRequest::new(self.model.clone(), vec![ChatMessage::user(prompt)], 0.0)
    }

    pub fn judge_equivalent(&self, question: &str, pred: &str, gold: &str) -> Result<Verdict, VerifyError> {
        let first = self.request(question, pred, gold);
        let reply = complete_with_retry(self.client.as_ref(), &first, &self.retry)?;
        if let Some(equivalent) = parse_judge_reply(&reply) {
            return Ok(verdict(equivalent, "judge"));
        }
        let mut second = first;
        second.messages.push(ChatMessage::assistant(reply));
        second.messages.push(ChatMessage::user(REPROMPT));
        let reply = complete_with_retry(self.client.as_ref(), &second, &self.retry)?;
        Ok(match parse_judge_reply(&reply) {
            Some(equivalent) => verdict(equivalent, "judge after reprompt"),
            None => verdict(false, "judge reply unparseable twice; scored as not equivalent"),
        })
    }
}

fn verdict(equivalent: bool, note: &str) -> Verdict {
    Verdict { equivalent, stage: VerdictStage::Judge, confidence_note: note.into() }
}

/// Reads a leading YES/NO token, ignoring case and surrounding punctuation.
pub fn parse_judge_reply(reply: &str) -> Option<bool> {
    let word = reply
        .split_whitespace()
        .next()?
        .trim_matches(|c: char| !c.is_ascii_alphanumeric())
        .to_ascii_uppercase();
    match word.as_str() {
        "YES" => Some(true),
        "NO" => Some(false),
        _ => None,
    }
}
