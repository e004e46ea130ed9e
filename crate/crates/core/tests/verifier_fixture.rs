use std::sync::Arc;

use omr_core::client::{MockChatClient, RetryPolicy};
use omr_core::verify::{Judge, RuleOutcome, VerdictStage, Verifier};
use serde::Deserialize;

#[derive(Deserialize)]
struct Case {
    category: String,
    question: String,
    pred: String,
    gold: String,
    equivalent: bool,
    route: String,
}

fn cases() -> Vec<Case> {
    serde_json::from_str(include_str!("fixtures/verifier_cases.json")).unwrap()
}

#[test]
fn fifty_labeled_cases() {
    let cases = cases();
    assert_eq!(cases.len(), 50);
    for cat in ["numeric", "fraction", "percent", "choice", "text"] {
        assert!(cases.iter().any(|c| c.category == cat));
    }
    let probe = Judge::new(Arc::new(MockChatClient::new()), "judge");
    let mut mock = MockChatClient::new();
    let mut routed = 0;
    for c in cases.iter().filter(|c| c.route == "judge") {
        let key = probe.request(&c.question, &c.pred, &c.gold).key();
        mock = mock.with_reply(key, if c.equivalent { "YES" } else { "NO" });
        routed += 1;
    }
    let mock = Arc::new(mock);
    let verifier = Verifier::with_judge(Judge::new(mock.clone(), "judge").with_retry(RetryPolicy::immediate(0)));
    let mut failures = Vec::new();
    for c in &cases {
        let rule = verifier.rule_stage(&c.pred, &c.gold).unwrap();
        let expect_rule = c.route == "rule";
        if expect_rule != (rule != RuleOutcome::CannotDecide) {
            failures.push(format!("{:?} vs {:?}: route {rule:?}", c.pred, c.gold));
            continue;
        }
        let v = verifier.two_stage_verify(&c.question, &c.pred, &c.gold).unwrap();
        let stage = if expect_rule { VerdictStage::Rule } else { VerdictStage::Judge };
        if v.equivalent != c.equivalent || v.stage != stage {
            failures.push(format!("{:?} vs {:?}: got {v:?}", c.pred, c.gold));
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
    assert_eq!(mock.calls(), routed);
}
