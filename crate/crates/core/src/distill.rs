//! Teacher sampling and rejection filtering.
//!
//! Every (sample, draw) request is journaled as it completes, so an
//! interrupted run resumes without re-issuing finished requests.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{complete_with_retry, ChatClient, ChatMessage, ChatRequest, ClientError, RetryPolicy};
use crate::corpus::{CorpusError, DatasetManifest, ReasoningTrace, Sample, Stage, TraceVerdict};
use crate::hashing::{mix64, sha256_hex};
use crate::verify::{Verifier, VerdictStage};
use crate::FORMAT_INSTRUCTION;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("journal {path}: {source}")]
    Journal {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("trace refers to unknown sample {0}")]
    UnknownSample(String),
    #[error("no pass-rate entry for {0}")]
    UnknownId(String),
    #[error("sample {0} has zero attempts")]
    NoAttempts(String),
    #[error("n_samples must be at least 1")]
    ZeroSamples,
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub model: String,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub workers: usize,
    #[serde(skip, default)]
    pub retry: RetryPolicy,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            model: "teacher".into(),
            temperature: 1.0,
            max_new_tokens: 28_696,
            workers: 8,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherRequest {
    pub sample_id: String,
    pub prompt: String,
    pub n_samples: u32,
    pub temperature: f64,
    pub max_new_tokens: usize,
}

/// Question followed by the `<think>/<answer>` format instruction.
pub fn teacher_prompt(sample: &Sample) -> String {
    format!("{}\n\n{}", sample.question, FORMAT_INSTRUCTION)
}

impl TeacherRequest {
    pub fn for_sample(sample: &Sample, n_samples: u32, cfg: &TeacherConfig) -> Self {
        TeacherRequest {
            sample_id: sample.id.clone(),
            prompt: teacher_prompt(sample),
            n_samples,
            temperature: cfg.temperature,
            max_new_tokens: cfg.max_new_tokens,
        }
    }

    /// Wire request for one draw; the draw index is sent as the seed.
    pub fn chat_request(&self, model: &str, draw: u32) -> ChatRequest {
        let mut r = ChatRequest::new(model, vec![ChatMessage::user(self.prompt.clone())], self.temperature);
        r.max_tokens = Some(self.max_new_tokens);
        r.seed = Some(u64::from(draw));
        r
    }

    pub fn journal_key(&self, model: &str, draw: u32) -> String {
        sha256_hex(format!("{}\n{}", self.sample_id, self.chat_request(model, draw).key()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub key: String,
    pub sample_id: String,
    pub draw: u32,
    pub response: String,
}

/// Append-only JSON Lines journal of completed requests.
pub struct Journal {
    path: PathBuf,
    done: HashMap<String, JournalEntry>,
    writer: Mutex<BufWriter<File>>,
}

impl Journal {
    /// Opens or creates the journal; a torn trailing line is ignored.
    pub fn open(path: &Path) -> Result<Journal, DistillError> {
        let err = |source| DistillError::Journal { path: path.to_path_buf(), source };
        let mut done = HashMap::new();
        if path.exists() {
            let f = File::open(path).map_err(err)?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(err)?;
                if let Ok(e) = serde_json::from_str::<JournalEntry>(&line) {
                    done.insert(e.key.clone(), e);
                }
            }
        }
        let f = OpenOptions::new().create(true).append(true).open(path).map_err(err)?;
        Ok(Journal { path: path.to_path_buf(), done, writer: Mutex::new(BufWriter::new(f)) })
    }

    pub fn len(&self) -> usize {
        self.done.len()
    }

    pub fn is_empty(&self) -> bool {
        self.done.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&JournalEntry> {
        self.done.get(key)
    }

    fn append(&self, e: &JournalEntry) -> Result<(), DistillError> {
        let mut w = self.writer.lock().unwrap();
        let line = serde_json::to_string(e).expect("journal entry serializes");
        writeln!(w, "{line}")
            .and_then(|_| w.flush())
            .map_err(|source| DistillError::Journal { path: self.path.clone(), source })
    }
}

#[derive(Debug, Clone, Default)]
pub struct DistillOutcome {
    /// Unverified traces ordered by (manifest order, draw).
    pub traces: Vec<ReasoningTrace>,
    /// Samples with at least one request that failed after retries.
    pub incomplete: Vec<String>,
    /// `(sample id, draw, error)` for each request that failed.
    pub failures: Vec<(String, u32, String)>,
    pub issued: usize,
    pub replayed: usize,
    pub empty_replies: usize,
}

enum DrawResult {
    Body(String),
    Failed(ClientError),
}

/// Issues `n` teacher requests per sample and stores every reply as an
/// unverified trace.
pub fn sample_traces(
    m: &DatasetManifest,
    n: u32,
    client: &dyn ChatClient,
    cfg: &TeacherConfig,
    journal: Option<&Journal>,
) -> Result<DistillOutcome, DistillError> {
    m.require_stage(Stage::Formatted)?;
    if n == 0 {
        return Err(DistillError::ZeroSamples);
    }
    let requests: Vec<TeacherRequest> =
        m.records.iter().map(|s| TeacherRequest::for_sample(s, n, cfg)).collect();
    let jobs: Vec<(usize, u32)> = (0..requests.len()).flat_map(|i| (0..n).map(move |d| (i, d))).collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| DistillError::Pool(e.to_string()))?;

    let results: Vec<Result<(DrawResult, bool), DistillError>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, draw)| {
                let req = &requests[i];
                let key = req.journal_key(&cfg.model, draw);
                if let Some(e) = journal.and_then(|j| j.get(&key)) {
                    return Ok((DrawResult::Body(e.response.clone()), true));
                }
                match complete_with_retry(client, &req.chat_request(&cfg.model, draw), &cfg.retry) {
                    Ok(body) => {
                        if let Some(j) = journal {
                            j.append(&JournalEntry {
                                key,
                                sample_id: req.sample_id.clone(),
                                draw,
                                response: body.clone(),
                            })?;
                        }
                        Ok((DrawResult::Body(body), false))
                    }
                    Err(e) => Ok((DrawResult::Failed(e), false)),
                }
            })
            .collect()
    });

    let mut out = DistillOutcome::default();
    for (&(i, draw), res) in jobs.iter().zip(results) {
        let (res, replayed) = res?;
        let id = &requests[i].sample_id;
        match res {
            DrawResult::Body(body) => {
                if replayed {
                    out.replayed += 1;
                } else {
                    out.issued += 1;
                }
                match ReasoningTrace::new(id.clone(), draw, body) {
                    Ok(t) => out.traces.push(t),
                    Err(_) => out.empty_replies += 1,
                }
            }
            DrawResult::Failed(e) => {
                out.issued += 1;
                out.failures.push((id.clone(), draw, e.to_string()));
                if out.incomplete.last() != Some(id) {
                    out.incomplete.push(id.clone());
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCount {
    pub attempts: u64,
    pub passes: u64,
}

/// Per-question attempt and pass counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassRateTable {
    pub entries: BTreeMap<String, PassCount>,
}

impl PassRateTable {
    pub fn record(&mut self, id: &str, passed: bool) {
        let e = self.entries.entry(id.to_string()).or_default();
        e.attempts += 1;
        if passed {
            e.passes += 1;
        }
    }

    pub fn merge(&mut self, other: &PassRateTable) {
        for (id, c) in &other.entries {
            let e = self.entries.entry(id.clone()).or_default();
            e.attempts += c.attempts;
            e.passes += c.passes;
        }
    }

    pub fn get(&self, id: &str) -> Option<PassCount> {
        self.entries.get(id).copied()
    }

    pub fn pass_rate(&self, id: &str) -> Option<f64> {
        self.get(id)
            .filter(|c| c.attempts > 0)
            .map(|c| c.passes as f64 / c.attempts as f64)
    }

    pub fn total_attempts(&self) -> u64 {
        self.entries.values().map(|c| c.attempts).sum()
    }

    /// `1 − pass_rate`.
    pub fn estimate_difficulty(&self, id: &str) -> Result<f64, DistillError> {
        let c = self.get(id).ok_or_else(|| DistillError::UnknownId(id.to_string()))?;
        if c.attempts == 0 {
            return Err(DistillError::NoAttempts(id.to_string()));
        }
        Ok(1.0 - c.passes as f64 / c.attempts as f64)
    }
}

#[derive(Debug, Clone, Default)]
pub struct FilterOutcome {
    pub kept: Vec<ReasoningTrace>,
    /// Every input trace with its verdict set.
    pub judged: Vec<ReasoningTrace>,
    pub table: PassRateTable,
}

/// Keeps traces whose extracted answer verifies against the gold answer.
pub fn rejection_filter(
    traces: &[ReasoningTrace],
    manifest: &DatasetManifest,
    verifier: &Verifier,
) -> Result<FilterOutcome, DistillError> {
    let by_id: HashMap<&str, &Sample> = manifest.records.iter().map(|s| (s.id.as_str(), s)).collect();
    for t in traces {
        if !by_id.contains_key(t.sample_id.as_str()) {
            return Err(DistillError::UnknownSample(t.sample_id.clone()));
        }
    }
    let judged: Vec<ReasoningTrace> = traces
        .par_iter()
        .map(|t| {
            let mut t = t.clone();
            if t.verdict != TraceVerdict::Unverified {
                return t;
            }
            let sample = by_id[t.sample_id.as_str()];
            let (verdict, note) = match t.answer() {
                None => (TraceVerdict::RuleFail, Some("no <answer> block".to_string())),
                Some(ans) => {
                    match verifier.two_stage_verify(&sample.question, ans, &sample.gold_for_verification()) {
                        Ok(v) => {
                            let verdict = match (v.stage, v.equivalent) {
                                (VerdictStage::Rule, true) => TraceVerdict::RulePass,
                                (VerdictStage::Rule, false) => TraceVerdict::RuleFail,
                                (VerdictStage::Judge, true) => TraceVerdict::JudgePass,
                                (VerdictStage::Judge, false) => TraceVerdict::JudgeFail,
                            };
                            (verdict, None)
                        }
                        Err(e) => (TraceVerdict::JudgeFail, Some(format!("verification error: {e}"))),
                    }
                }
            };
            t.set_verdict(verdict).expect("unverified trace");
            t.note = note;
            t
        })
        .collect();
    let mut table = PassRateTable::default();
    for t in &judged {
        table.record(&t.sample_id, t.verdict.passed());
    }
    let kept = judged.iter().filter(|t| t.verdict.passed()).cloned().collect();
    Ok(FilterOutcome { kept, judged, table })
}

/// Deterministic stand-in teacher for offline runs.
///
/// Answers each request correctly with probability `accuracy`, decided by a
/// hash of the request and `seed`. Wrong answers stay rule-decidable.
pub struct SimulatedTeacher {
    golds: HashMap<String, String>,
    accuracy: f64,
    seed: u64,
}

impl SimulatedTeacher {
    pub fn new(manifest: &DatasetManifest, accuracy: f64, seed: u64) -> Self {
        let golds = manifest
            .records
            .iter()
            .map(|s| (teacher_prompt(s), s.gold_answer.clone()))
            .chain(manifest.records.iter().map(|s| (s.question.clone(), s.gold_answer.clone())))
            .collect();
        SimulatedTeacher { golds, accuracy, seed }
    }

    fn wrong_answer(gold: &str) -> String {
        if let Ok(n) = gold.trim().parse::<i64>() {
            return (n + 1).to_string();
        }
        let t = gold.trim();
        if t.len() == 1 && t.chars().all(|c| c.is_ascii_alphabetic()) {
            let c = t.chars().next().unwrap().to_ascii_uppercase();
            return (if c == 'Z' { 'A' } else { (c as u8 + 1) as char }).to_string();
        }
        format!("{}1", t.trim_end_matches('.'))
    }

    pub fn reply_for(&self, request: &ChatRequest) -> Option<String> {
        let prompt = request.messages.iter().rev().find(|m| m.role == "user")?;
        let gold = self.golds.get(&prompt.content)?;
        let h = mix64(u64::from_str_radix(&request.key()[..16], 16).unwrap() ^ self.seed);
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        let answer = if u < self.accuracy { gold.clone() } else { Self::wrong_answer(gold) };
        Some(format!(
            "<think>Let me read the question carefully. Wait, check the numbers once more.</think><answer>{answer}</answer>"
        ))
    }
}

impl ChatClient for SimulatedTeacher {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        self.reply_for(request).ok_or_else(|| ClientError::Unscripted(request.key()))
    }
}
