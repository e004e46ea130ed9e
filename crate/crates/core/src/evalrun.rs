//! Evaluation runner: prompt assembly, generation, answer extraction,
//! verification, rollout averaging and reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use num_rational::BigRational;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{complete_with_retry, ChatClient, ChatMessage, ChatRequest, RetryPolicy};
use crate::corpus::{extract_tagged_answer, DatasetManifest, Sample};
use crate::verify::Verifier;

pub const EVAL_SYSTEM_PROMPT: &str = include_str!("../assets/eval_prompt.md");
pub const DEFAULT_MAX_NEW_TOKENS: usize = 49_152;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("sample {0} has an empty question")]
    EmptyQuestion(String),
    #[error("rollouts must be at least 1")]
    ZeroRollouts,
    #[error("worker pool: {0}")]
    Pool(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub model: String,
    pub rollouts: u32,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub workers: usize,
    #[serde(skip, default)]
    pub retry: RetryPolicy,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            model: "policy".into(),
            rollouts: 1,
            temperature: 0.0,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            seed: 0,
            workers: 8,
            retry: RetryPolicy::default(),
        }
    }
}

impl EvalConfig {
    /// Eight rollouts at temperature 1.0, averaged.
    pub fn aime() -> Self {
        EvalConfig { rollouts: 8, temperature: 1.0, ..Default::default() }
    }
}

pub fn build_messages(sample: &Sample) -> Result<Vec<ChatMessage>, EvalError> {
    if sample.question.trim().is_empty() {
        return Err(EvalError::EmptyQuestion(sample.id.clone()));
    }
    Ok(vec![ChatMessage::system(EVAL_SYSTEM_PROMPT.trim_end()), ChatMessage::user(sample.question.clone())])
}

/// The full prompt text: system template, blank line, question.
pub fn build_prompt(sample: &Sample) -> Result<String, EvalError> {
    let msgs = build_messages(sample)?;
    Ok(format!("{}\n\n{}", msgs[0].content, msgs[1].content))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub correct: bool,
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub sample_id: String,
    pub domain: String,
    pub source: String,
    pub rollouts: Vec<RolloutResult>,
    pub score: f64,
}

impl SampleResult {
    pub fn correct(&self) -> usize {
        self.rollouts.iter().filter(|r| r.correct).count()
    }

    pub fn errors(&self) -> usize {
        self.rollouts.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn score_exact(&self) -> BigRational {
        BigRational::new(self.correct().into(), self.rollouts.len().max(1).into())
    }
}

fn rollout(sample: &Sample, client: &dyn ChatClient, verifier: &Verifier, cfg: &EvalConfig, r: u32) -> RolloutResult {
    let msgs = build_messages(sample).expect("checked before dispatch");
    let mut req = ChatRequest::new(cfg.model.clone(), msgs, cfg.temperature);
    req.max_tokens = Some(cfg.max_new_tokens);
    req.seed = Some(cfg.seed.wrapping_add(u64::from(r)));
    let body = match complete_with_retry(client, &req, &cfg.retry) {
        Ok(b) => b,
        Err(e) => return RolloutResult { correct: false, answer: None, error: Some(e.to_string()) },
    };
    let tags = extract_tagged_answer(&body);
    let Some(answer) = tags.answer_text(&body) else {
        return RolloutResult { correct: false, answer: None, error: None };
    };
    match verifier.two_stage_verify(&sample.question, answer, &sample.gold_for_verification()) {
        Ok(v) => RolloutResult { correct: v.equivalent, answer: Some(answer.to_string()), error: None },
        Err(e) => RolloutResult { correct: false, answer: Some(answer.to_string()), error: Some(e.to_string()) },
    }
}

/// Generates and scores `cfg.rollouts` responses per sample. Failed
/// requests score 0 and are kept in the result with their error.
pub fn run_eval(
    m: &DatasetManifest,
    client: &dyn ChatClient,
    verifier: &Verifier,
    cfg: &EvalConfig,
) -> Result<Vec<SampleResult>, EvalError> {
    if cfg.rollouts == 0 {
        return Err(EvalError::ZeroRollouts);
    }
    for s in &m.records {
        build_messages(s)?;
    }
    let jobs: Vec<(usize, u32)> = (0..m.len()).flat_map(|i| (0..cfg.rollouts).map(move |r| (i, r))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    let outs: Vec<RolloutResult> =
        pool.install(|| jobs.par_iter().map(|&(i, r)| rollout(&m.records[i], client, verifier, cfg, r)).collect());
    let mut outs = outs.into_iter();
    Ok(m.records
        .iter()
        .map(|s| {
            let rollouts: Vec<RolloutResult> = outs.by_ref().take(cfg.rollouts as usize).collect();
            let score = rollouts.iter().filter(|r| r.correct).count() as f64 / rollouts.len() as f64;
            SampleResult {
                sample_id: s.id.clone(),
                domain: s.domain.to_string(),
                source: s.source.clone(),
                rollouts,
                score,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    Domain,
    Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub samples: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub grouping: Grouping,
    pub samples: usize,
    pub overall: f64,
    /// True when there were no results and `overall` is a placeholder 0.
    pub empty: bool,
    pub groups: BTreeMap<String, GroupScore>,
    pub failed_rollouts: usize,
    pub samples_with_errors: usize,
}

pub fn aggregate_scores(results: &[SampleResult], grouping: Grouping) -> EvalReport {
    let mut sums: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for r in results {
        let key = match grouping {
            Grouping::Domain => r.domain.clone(),
            Grouping::Source => r.source.clone(),
        };
        let e = sums.entry(key).or_default();
        e.0 += 1;
        e.1 += r.score;
    }
    let total: f64 = results.iter().map(|r| r.score).sum();
    EvalReport {
        grouping,
        samples: results.len(),
        overall: if results.is_empty() { 0.0 } else { total / results.len() as f64 },
        empty: results.is_empty(),
        groups: sums
            .into_iter()
            .map(|(k, (n, s))| (k, GroupScore { samples: n, accuracy: s / n as f64 }))
            .collect(),
        failed_rollouts: results.iter().map(|r| r.errors()).sum(),
        samples_with_errors: results.iter().filter(|r| r.errors() > 0).count(),
    }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let width = self.groups.keys().map(|k| k.len()).max().unwrap_or(0).max(7);
        let _ = writeln!(out, "{:<width$}  {:>7}  {:>8}", "group", "samples", "accuracy");
        for (k, g) in &self.groups {
            let _ = writeln!(out, "{:<width$}  {:>7}  {:>8.4}", k, g.samples, g.accuracy);
        }
        let _ = writeln!(out, "{:<width$}  {:>7}  {:>8.4}", "overall", self.samples, self.overall);
        if self.empty {
            let _ = writeln!(out, "(no results)");
        }
        let _ = writeln!(
            out,
            "failed rollouts: {} across {} samples",
            self.failed_rollouts, self.samples_with_errors
        );
        out
    }

    /// Writes `eval_report.json` and `eval_report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        for (name, body) in [("eval_report.json", self.to_json()), ("eval_report.txt", self.to_text())] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|source| EvalError::Io { path, source })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::{ClientError, MockChatClient};
    use crate::corpus::{DomainTag, Stage};
    use num_traits::ToPrimitive;
    use proptest::prelude::*;

    fn manifest(n: usize) -> DatasetManifest {
        DatasetManifest::new(
            (0..n)
                .map(|i| Sample {
                    id: format!("q{i}"),
                    question: format!("What is {i} plus 1?"),
                    image_refs: vec![],
                    gold_answer: (i + 1).to_string(),
                    domain: if i % 2 == 0 { DomainTag::TxtMath } else { DomainTag::Chart },
                    source: "unit".into(),
                    meta: Default::default(),
                })
                .collect(),
            Stage::Formatted,
        )
    }

    fn gold_echo(offset: i64) -> MockChatClient {
        MockChatClient::new().with_fallback(move |r| {
            let q = &r.messages[1].content;
            let n: i64 = q.trim_start_matches("What is ").split(' ').next().unwrap().parse().unwrap();
            Ok(format!("<think>add</think><answer>{}</answer>", n + 1 + offset))
        })
    }

    fn cfg() -> EvalConfig {
        EvalConfig { retry: RetryPolicy::immediate(1), workers: 4, ..Default::default() }
    }

    #[test]
    fn prompt_is_stable_and_tagged() {
        let m = manifest(1);
        let a = build_prompt(&m.records[0]).unwrap();
        assert_eq!(a, build_prompt(&m.records[0]).unwrap());
        assert!(a.contains("<think>") && a.contains("<answer>"));
        let mut s = m.records[0].clone();
        s.question = "  ".into();
        assert!(matches!(build_prompt(&s), Err(EvalError::EmptyQuestion(_))));
    }

    #[test]
    fn oracle_and_wrong_clients() {
        let m = manifest(6);
        let v = Verifier::rule_only();
        let good = run_eval(&m, &gold_echo(0), &v, &cfg()).unwrap();
        assert_eq!(aggregate_scores(&good, Grouping::Domain).overall, 1.0);
        let bad = run_eval(&m, &gold_echo(3), &v, &cfg()).unwrap();
        assert_eq!(aggregate_scores(&bad, Grouping::Domain).overall, 0.0);
    }

    #[test]
    fn six_of_eight_rollouts() {
        let m = manifest(1);
        let mock = MockChatClient::new().with_fallback(|r| {
            let ans = if r.seed.unwrap() < 6 { "1" } else { "9" };
            Ok(format!("<answer>{ans}</answer>"))
        });
        let out = run_eval(&m, &mock, &Verifier::rule_only(), &EvalConfig { seed: 0, ..EvalConfig::aime() }).unwrap();
        assert_eq!(out[0].rollouts.len(), 8);
        assert_eq!(out[0].score, 0.75);
    }

    #[test]
    fn errors_score_zero_and_are_reported() {
        let m = manifest(2);
        let mock = MockChatClient::new().with_fallback(|r| {
            if r.messages[1].content.contains("What is 1 ") {
                Err(ClientError::Status(503))
            } else {
                Ok("<answer>1</answer>".into())
            }
        });
        let out = run_eval(&m, &mock, &Verifier::rule_only(), &cfg()).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].score, 0.0);
        assert!(out[1].rollouts[0].error.is_some());
        let rep = aggregate_scores(&out, Grouping::Domain);
        assert_eq!((rep.failed_rollouts, rep.samples_with_errors), (1, 1));
        assert_eq!(rep.overall, 0.5);
    }

    #[test]
    fn defaults_and_presets() {
        let d = EvalConfig::default();
        assert_eq!((d.rollouts, d.temperature, d.max_new_tokens), (1, 0.0, 49_152));
        let a = EvalConfig::aime();
        assert_eq!((a.rollouts, a.temperature), (8, 1.0));
        assert!(matches!(
            run_eval(&manifest(1), &gold_echo(0), &Verifier::rule_only(), &EvalConfig { rollouts: 0, ..cfg() }),
            Err(EvalError::ZeroRollouts)
        ));
    }

    fn result(domain: &str, score: f64) -> SampleResult {
        SampleResult {
            sample_id: "x".into(),
            domain: domain.into(),
            source: "s".into(),
            rollouts: vec![RolloutResult { correct: score == 1.0, answer: None, error: None }],
            score,
        }
    }

    #[test]
    fn aggregation_examples() {
        let r = aggregate_scores(&[result("a", 1.0), result("a", 0.0)], Grouping::Domain);
        assert_eq!(r.groups["a"].accuracy, 0.5);
        let e = aggregate_scores(&[], Grouping::Domain);
        assert!(e.empty && e.groups.is_empty() && e.overall == 0.0);
        let mut rs: Vec<SampleResult> = (0..10).map(|i| result("x", if i < 8 { 1.0 } else { 0.0 })).collect();
        rs.extend((0..30).map(|i| result("y", if i < 18 { 1.0 } else { 0.0 })));
        let r = aggregate_scores(&rs, Grouping::Domain);
        assert!((r.groups["x"].accuracy - 0.8).abs() < 1e-12);
        assert!((r.groups["y"].accuracy - 0.6).abs() < 1e-12);
        assert!((r.overall - 0.65).abs() < 1e-12);
    }

    #[test]
    fn reports_written() {
        let dir = tempfile::tempdir().unwrap();
        let r = aggregate_scores(&[result("a", 1.0)], Grouping::Source);
        r.write(dir.path()).unwrap();
        let back: EvalReport =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("eval_report.json")).unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(std::fs::read_to_string(dir.path().join("eval_report.txt")).unwrap().contains("overall"));
    }

    #[test]
    fn reproducible_under_seed() {
        let m = manifest(8);
        let mock = MockChatClient::new().with_fallback(|r| {
            let ok = crate::hashing::mix64(r.seed.unwrap() ^ r.messages[1].content.len() as u64) % 3 != 0;
            Ok(format!("<answer>{}</answer>", if ok { "1" } else { "0" }))
        });
        let c = EvalConfig { rollouts: 4, temperature: 1.0, seed: 17, ..cfg() };
        let a = run_eval(&m, &mock, &Verifier::rule_only(), &c).unwrap();
        let b = run_eval(&m, &mock, &Verifier::rule_only(), &c).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn overall_is_weighted_mean_of_groups(spec in proptest::collection::vec((0usize..3, 0usize..5, 1usize..5), 1..40)) {
            let rs: Vec<SampleResult> = spec
                .iter()
                .map(|&(d, c, n)| {
                    let c = c.min(n);
                    let rollouts = (0..n).map(|k| RolloutResult { correct: k < c, answer: None, error: None }).collect();
                    SampleResult { sample_id: "s".into(), domain: format!("d{d}"), source: "s".into(), rollouts, score: c as f64 / n as f64 }
                })
                .collect();
            let total: BigRational = rs.iter().map(|r| r.score_exact()).sum();
            let overall_exact = total / BigRational::from_integer(rs.len().into());
            let mut by: BTreeMap<String, (BigRational, usize)> = BTreeMap::new();
            for r in &rs {
                let e = by.entry(r.domain.clone()).or_insert((BigRational::from_integer(0.into()), 0));
                e.0 += r.score_exact();
                e.1 += 1;
            }
            let weighted: BigRational = by
                .values()
                .map(|(s, n)| s / BigRational::from_integer((*n).into()) * BigRational::from_integer((*n).into()))
                .sum::<BigRational>()
                / BigRational::from_integer(rs.len().into());
            prop_assert_eq!(&weighted, &overall_exact);
            let rep = aggregate_scores(&rs, Grouping::Domain);
            prop_assert!((rep.overall - overall_exact.to_f64().unwrap()).abs() < 1e-12);
            for (k, (s, n)) in &by {
                let exact = (s / BigRational::from_integer((*n).into())).to_f64().unwrap();
                prop_assert!((rep.groups[k].accuracy - exact).abs() < 1e-12);
            }
        }
    }
}
