//! Two-stage answer verification: exact rule checks first, an LLM judge
//! only for pairs the rules cannot decide.

mod canonical;
mod judge;

use num_traits::Signed;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use canonical::{canonicalize_answer, AnswerForm, AnswerKind, Bound, Interval, UnitFlags};
pub use judge::{parse_judge_reply, Judge, DEFAULT_JUDGE_TEMPLATE};

use crate::client::ClientError;
use canonical::to_f64;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("answer is empty")]
    EmptyAnswer,
    #[error("judge request failed: {0}")]
    Judge(#[from] ClientError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleOutcome {
    Yes,
    No,
    CannotDecide,
}

impl RuleOutcome {
    fn from_bool(b: bool) -> Self {
        if b {
            RuleOutcome::Yes
        } else {
            RuleOutcome::No
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictStage {
    Rule,
    Judge,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub equivalent: bool,
    pub stage: VerdictStage,
    pub confidence_note: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuleConfig {
    /// Absolute tolerance applied when either side is a truncated decimal.
    pub abs_tol: f64,
}

impl Default for RuleConfig {
    fn default() -> Self {
        RuleConfig { abs_tol: 1e-6 }
    }
}

pub fn rule_equivalent(pred: &AnswerForm, gold: &AnswerForm) -> RuleOutcome {
    rule_equivalent_with(pred, gold, &RuleConfig::default())
}

pub fn rule_equivalent_with(pred: &AnswerForm, gold: &AnswerForm, cfg: &RuleConfig) -> RuleOutcome {
    use AnswerKind::*;
    match (pred.kind, gold.kind) {
        (a, b) if a.is_numeric() && b.is_numeric() => {
            RuleOutcome::from_bool(numeric_equal(pred, gold, cfg))
        }
        (ChoiceLetter, ChoiceLetter) => RuleOutcome::from_bool(pred.choice == gold.choice),
        (ChoiceLetter, _) => via_alias(pred, gold, cfg),
        (_, ChoiceLetter) => via_alias(gold, pred, cfg),
        (Interval, Interval) => interval_equal(pred, gold, cfg),
        (SetOfForms, SetOfForms) => set_equal(pred, gold, cfg),
        (Text, Text) if pred.canonical == gold.canonical => RuleOutcome::Yes,
        // Exact symbolic normal forms are complete for their grammar.
        (Text, Text) if pred.symbolic && gold.symbolic => RuleOutcome::No,
        _ => RuleOutcome::CannotDecide,
    }
}

/// Compares a non-choice answer against the content of a choice option.
fn via_alias(choice: &AnswerForm, other: &AnswerForm, cfg: &RuleConfig) -> RuleOutcome {
    let mut undecided = false;
    for alias in &choice.aliases {
        match rule_equivalent_with(other, alias, cfg) {
            RuleOutcome::Yes => return RuleOutcome::Yes,
            RuleOutcome::No => {}
            RuleOutcome::CannotDecide => undecided = true,
        }
    }
    if choice.aliases.is_empty() || undecided {
        RuleOutcome::CannotDecide
    } else {
        RuleOutcome::No
    }
}

fn numeric_equal(a: &AnswerForm, b: &AnswerForm, cfg: &RuleConfig) -> bool {
    let (Some(va), Some(vb)) = (&a.value, &b.value) else {
        return false;
    };
    let approx = a.approximate || b.approximate;
    let close = |x: &num_rational::BigRational, y: &num_rational::BigRational| {
        x == y || (approx && to_f64(&(x - y).abs()) <= cfg.abs_tol)
    };
    if close(va, vb) {
        return true;
    }
    // "50%" against a bare "50": compare the literal before scaling.
    let hundred = num_rational::BigRational::from_integer(100.into());
    match (a.units.percent, b.units.percent) {
        (true, false) => close(&(va * &hundred), vb),
        (false, true) => close(va, &(vb * &hundred)),
        _ => false,
    }
}

fn bound_equal(a: &Bound, b: &Bound, cfg: &RuleConfig) -> RuleOutcome {
    match (a, b) {
        (Bound::NegInf, Bound::NegInf) | (Bound::PosInf, Bound::PosInf) => RuleOutcome::Yes,
        (Bound::Finite(x), Bound::Finite(y)) => rule_equivalent_with(x, y, cfg),
        _ => RuleOutcome::No,
    }
}

fn interval_equal(a: &AnswerForm, b: &AnswerForm, cfg: &RuleConfig) -> RuleOutcome {
    let (Some(x), Some(y)) = (&a.interval, &b.interval) else {
        return RuleOutcome::CannotDecide;
    };
    if x.left_closed != y.left_closed || x.right_closed != y.right_closed {
        return RuleOutcome::No;
    }
    match (bound_equal(&x.lo, &y.lo, cfg), bound_equal(&x.hi, &y.hi, cfg)) {
        (RuleOutcome::Yes, RuleOutcome::Yes) => RuleOutcome::Yes,
        (RuleOutcome::No, _) | (_, RuleOutcome::No) => RuleOutcome::No,
        _ => RuleOutcome::CannotDecide,
    }
}

/// Order-insensitive element matching; each gold element is used once.
fn set_equal(a: &AnswerForm, b: &AnswerForm, cfg: &RuleConfig) -> RuleOutcome {
    if a.elements.len() != b.elements.len() {
        return RuleOutcome::No;
    }
    let mut used = vec![false; b.elements.len()];
    let mut undecided = false;
    for x in &a.elements {
        let mut matched = false;
        for (j, y) in b.elements.iter().enumerate() {
            if used[j] {
                continue;
            }
            match rule_equivalent_with(x, y, cfg) {
                RuleOutcome::Yes => {
                    used[j] = true;
                    matched = true;
                    break;
                }
                RuleOutcome::CannotDecide => undecided = true,
                RuleOutcome::No => {}
            }
        }
        if !matched {
            return if undecided { RuleOutcome::CannotDecide } else { RuleOutcome::No };
        }
    }
    RuleOutcome::Yes
}

/// Rule checker plus optional judge fallback.
///
/// Without a judge, undecidable pairs are scored as not equivalent.
pub struct Verifier {
    pub rules: RuleConfig,
    judge: Option<Judge>,
}

impl Default for Verifier {
    fn default() -> Self {
        Verifier::rule_only()
    }
}

impl Verifier {
    pub fn rule_only() -> Self {
        Verifier { rules: RuleConfig::default(), judge: None }
    }

    pub fn with_judge(judge: Judge) -> Self {
        Verifier { rules: RuleConfig::default(), judge: Some(judge) }
    }

    pub fn judge(&self) -> Option<&Judge> {
        self.judge.as_ref()
    }

    /// Rule stage only. An empty prediction is a mismatch; an empty gold is an error.
    pub fn rule_stage(&self, pred: &str, gold: &str) -> Result<RuleOutcome, VerifyError> {
        let gold = canonicalize_answer(gold)?;
        let pred = match canonicalize_answer(pred) {
            Ok(p) => p,
            Err(VerifyError::EmptyAnswer) => return Ok(RuleOutcome::No),
            Err(e) => return Err(e),
        };
        Ok(rule_equivalent_with(&pred, &gold, &self.rules))
    }

    pub fn two_stage_verify(&self, question: &str, pred: &str, gold: &str) -> Result<Verdict, VerifyError> {
        match self.rule_stage(pred, gold)? {
            RuleOutcome::Yes => Ok(Verdict {
                equivalent: true,
                stage: VerdictStage::Rule,
                confidence_note: "rule match".into(),
            }),
            RuleOutcome::No => Ok(Verdict {
                equivalent: false,
                stage: VerdictStage::Rule,
                confidence_note: "rule mismatch".into(),
            }),
            RuleOutcome::CannotDecide => match &self.judge {
                Some(j) => j.judge_equivalent(question, pred, gold),
                None => Ok(Verdict {
                    equivalent: false,
                    stage: VerdictStage::Rule,
                    confidence_note: "undecided by rules; no judge configured".into(),
                }),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::{ChatClient, MockChatClient};
    use std::sync::Arc;

    fn eq(p: &str, g: &str) -> RuleOutcome {
        rule_equivalent(&canonicalize_answer(p).unwrap(), &canonicalize_answer(g).unwrap())
    }

    #[test]
    fn spec_rule_examples() {
        assert_eq!(eq("0.5", "1/2"), RuleOutcome::Yes);
        assert_eq!(eq("b", "B. 3"), RuleOutcome::Yes);
        assert_eq!(eq("a delicious pastry", "croissant"), RuleOutcome::CannotDecide);
    }

    #[test]
    fn truncated_decimals_use_tolerance() {
        assert_eq!(eq("0.333333", "1/3"), RuleOutcome::Yes);
        assert_eq!(eq("0.3333", "1/3"), RuleOutcome::No);
        assert_eq!(eq("0.33", "1/3"), RuleOutcome::No);
        // integers are exact, no tolerance
        assert_eq!(eq("3", "1/3"), RuleOutcome::No);
    }

    #[test]
    fn choice_rules() {
        assert_eq!(eq("C", "B. 3"), RuleOutcome::No);
        assert_eq!(eq("(b)", "B"), RuleOutcome::Yes);
        assert_eq!(eq("3", "B. 3"), RuleOutcome::Yes);
        assert_eq!(eq("4", "B. 3"), RuleOutcome::No);
        assert_eq!(eq("B", "3"), RuleOutcome::CannotDecide);
        assert_eq!(eq("eating them", "B. eating them"), RuleOutcome::Yes);
    }

    #[test]
    fn percent_rules() {
        assert_eq!(eq("50%", "0.5"), RuleOutcome::Yes);
        assert_eq!(eq("50", "50%"), RuleOutcome::Yes);
        assert_eq!(eq("40%", "0.5"), RuleOutcome::No);
    }

    #[test]
    fn structured_kinds() {
        assert_eq!(eq("[1, 2)", "[1.0, 2)"), RuleOutcome::Yes);
        assert_eq!(eq("[1, 2]", "[1, 2)"), RuleOutcome::No);
        assert_eq!(eq("2, 1", "\\{1, 2\\}"), RuleOutcome::Yes);
        assert_eq!(eq("1, 2", "1, 3"), RuleOutcome::No);
        assert_eq!(eq("\\frac{\\pi}{2}", "pi/2"), RuleOutcome::Yes);
        assert_eq!(eq("2\\sqrt{2}", "\\sqrt{8}"), RuleOutcome::Yes);
        assert_eq!(eq("\\sqrt{3}", "\\sqrt{2}"), RuleOutcome::No);
        assert_eq!(eq("3.14159", "\\pi"), RuleOutcome::CannotDecide);
    }

    #[test]
    fn numeric_vs_text_is_undecided() {
        assert_eq!(eq("seven", "7"), RuleOutcome::CannotDecide);
    }

    #[test]
    fn two_stage_rule_decides_without_judge_call() {
        let mock = Arc::new(MockChatClient::new().with_sequence(["YES"]));
        let v = Verifier::with_judge(Judge::new(mock.clone(), "judge-model"));
        let verdict = v.two_stage_verify("q", "0.5", "1/2").unwrap();
        assert!(verdict.equivalent);
        assert_eq!(verdict.stage, VerdictStage::Rule);
        let verdict = v.two_stage_verify("q", "paris", "Paris").unwrap();
        assert!(verdict.equivalent);
        let verdict = v.two_stage_verify("q", "2", "3").unwrap();
        assert!(!verdict.equivalent);
        assert_eq!(mock.calls(), 0);
    }

    #[test]
    fn two_stage_routes_undecided_to_judge() {
        let mock = Arc::new(MockChatClient::new().with_sequence(["YES"]));
        let v = Verifier::with_judge(Judge::new(mock.clone(), "judge-model"));
        let verdict = v.two_stage_verify("what is it?", "a delicious pastry", "croissant").unwrap();
        assert!(verdict.equivalent);
        assert_eq!(verdict.stage, VerdictStage::Judge);
        assert_eq!(mock.calls(), 1);
    }

    #[test]
    fn empty_prediction_is_rule_no() {
        let v = Verifier::rule_only();
        let verdict = v.two_stage_verify("q", "  ", "3").unwrap();
        assert!(!verdict.equivalent);
        assert_eq!(verdict.stage, VerdictStage::Rule);
        assert!(matches!(v.two_stage_verify("q", "3", ""), Err(VerifyError::EmptyAnswer)));
    }

    #[test]
    fn no_judge_scores_undecided_as_false() {
        let v = Verifier::rule_only();
        let verdict = v.two_stage_verify("q", "pastry", "croissant").unwrap();
        assert!(!verdict.equivalent);
        assert_eq!(verdict.stage, VerdictStage::Rule);
    }

    #[test]
    fn arc_dyn_client_is_usable() {
        let mock: Arc<dyn ChatClient> = Arc::new(MockChatClient::new().with_sequence(["NO"]));
        let v = Verifier::with_judge(Judge::new(mock, "m"));
        assert!(!v.two_stage_verify("q", "cat", "dog").unwrap().equivalent);
    }
}
