//! Dataset model shared by every pipeline stage.
//!
//! Manifests are immutable values: each operation takes a manifest and
//! returns a new one, appending a lineage entry.

mod ingest;
mod mix;
mod normalize;
mod stats;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::hashing::short_hash;
use crate::tokenizer::count_tokens;

pub use ingest::{ingest_records, IngestReport, SkipReason};
pub use mix::{mix_domains, Weight};
pub use normalize::{extract_tagged_answer, normalize_format, normalize_question, TaggedAnswer};
pub use stats::{corpus_stats, CorpusStats};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("stage cannot move from {from} back to {to}")]
    StageRegression { from: Stage, to: Stage },
    #[error("operation requires stage {required} or later, manifest is {actual}")]
    StageTooEarly { required: Stage, actual: Stage },
    #[error("all mixing weights are zero")]
    ZeroWeights,
    #[error("no parts to mix")]
    NoParts,
    #[error("record id {0} appears in more than one part")]
    DuplicateId(String),
    #[error("trace verdict already set to {0:?}")]
    VerdictAlreadySet(TraceVerdict),
    #[error("trace body is empty")]
    EmptyTrace,
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io { path: path.display().to_string(), source }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DomainTag {
    GeneralVqa,
    ImgMath,
    TxtMath,
    Science,
    Chart,
    Puzzle,
    Other(String),
}

impl DomainTag {
    pub fn as_str(&self) -> &str {
        match self {
            DomainTag::GeneralVqa => "general_vqa",
            DomainTag::ImgMath => "img_math",
            DomainTag::TxtMath => "txt_math",
            DomainTag::Science => "science",
            DomainTag::Chart => "chart",
            DomainTag::Puzzle => "puzzle",
            DomainTag::Other(label) => label,
        }
    }
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DomainTag {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "general_vqa" => DomainTag::GeneralVqa,
            "img_math" => DomainTag::ImgMath,
            "txt_math" => DomainTag::TxtMath,
            "science" => DomainTag::Science,
            "chart" => DomainTag::Chart,
            "puzzle" => DomainTag::Puzzle,
            other => DomainTag::Other(other.to_string()),
        })
    }
}

impl Serialize for DomainTag {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for DomainTag {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(s.parse().expect("infallible"))
    }
}

impl Default for DomainTag {
    fn default() -> Self {
        DomainTag::Other("unspecified".into())
    }
}

/// One question/answer record. Serialized with the JSON Lines record schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub question: String,
    #[serde(rename = "images", default)]
    pub image_refs: Vec<String>,
    #[serde(rename = "answer")]
    pub gold_answer: String,
    #[serde(default)]
    pub domain: DomainTag,
    #[serde(default)]
    pub source: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

/// Meta key holding the option content of a multiple-choice gold answer.
pub const META_ANSWER_ALIAS: &str = "answer_alias";

impl Sample {
    /// Gold answer as handed to the verifier, with the option content
    /// re-attached to a bare choice letter.
    pub fn gold_for_verification(&self) -> String {
        match self.meta.get(META_ANSWER_ALIAS) {
            Some(alias) => format!("{}. {}", self.gold_answer, alias),
            None => self.gold_answer.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceVerdict {
    Unverified,
    RulePass,
    RuleFail,
    JudgePass,
    JudgeFail,
}

impl TraceVerdict {
    pub fn passed(self) -> bool {
        matches!(self, TraceVerdict::RulePass | TraceVerdict::JudgePass)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TraceVerdict::Unverified => "unverified",
            TraceVerdict::RulePass => "rule_pass",
            TraceVerdict::RuleFail => "rule_fail",
            TraceVerdict::JudgePass => "judge_pass",
            TraceVerdict::JudgeFail => "judge_fail",
        }
    }
}

/// One generated `<think>/<answer>` output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub sample_id: String,
    /// Index of this draw among the samples requested for the question.
    pub draw: u32,
    pub body: String,
    pub think_span: Option<Range<usize>>,
    pub answer_span: Option<Range<usize>>,
    pub token_len: usize,
    pub verdict: TraceVerdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl ReasoningTrace {
    pub fn new(sample_id: impl Into<String>, draw: u32, body: impl Into<String>) -> Result<Self, CorpusError> {
        let body = body.into();
        let token_len = count_tokens(&body);
        if token_len == 0 {
            return Err(CorpusError::EmptyTrace);
        }
        let tags = extract_tagged_answer(&body);
        Ok(ReasoningTrace {
            sample_id: sample_id.into(),
            draw,
            think_span: tags.think,
            answer_span: tags.answer,
            body,
            token_len,
            verdict: TraceVerdict::Unverified,
            note: None,
        })
    }

    pub fn answer(&self) -> Option<&str> {
        self.answer_span.clone().map(|r| &self.body[r])
    }

    pub fn think(&self) -> Option<&str> {
        self.think_span.clone().map(|r| &self.body[r])
    }

    /// Sets the verdict once; verdicts never move back to unverified.
    pub fn set_verdict(&mut self, v: TraceVerdict) -> Result<(), CorpusError> {
        if self.verdict != TraceVerdict::Unverified {
            return Err(CorpusError::VerdictAlreadySet(self.verdict));
        }
        self.verdict = v;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Raw,
    Formatted,
    Distilled,
    Deduped,
    Curated,
    Packed,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Raw => "raw",
            Stage::Formatted => "formatted",
            Stage::Distilled => "distilled",
            Stage::Deduped => "deduped",
            Stage::Curated => "curated",
            Stage::Packed => "packed",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub operation: String,
    pub param_hash: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tallies: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<Sample>,
    pub stage: Stage,
    pub lineage: Vec<LineageEntry>,
}

impl DatasetManifest {
    pub fn new(records: Vec<Sample>, stage: Stage) -> Self {
        DatasetManifest { records, stage, lineage: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.records.iter().find(|s| s.id == id)
    }

    pub fn require_stage(&self, required: Stage) -> Result<(), CorpusError> {
        if self.stage < required {
            return Err(CorpusError::StageTooEarly { required, actual: self.stage });
        }
        Ok(())
    }

    /// New manifest with `records`, moved to `stage`, lineage extended by
    /// `(operation, hash(params))`.
    pub fn derive(
        &self,
        records: Vec<Sample>,
        stage: Stage,
        operation: &str,
        params: &serde_json::Value,
        tallies: BTreeMap<String, u64>,
    ) -> Result<DatasetManifest, CorpusError> {
        if stage < self.stage {
            return Err(CorpusError::StageRegression { from: self.stage, to: stage });
        }
        let mut lineage = self.lineage.clone();
        lineage.push(LineageEntry {
            operation: operation.to_string(),
            param_hash: short_hash(params.to_string()),
            tallies,
        });
        Ok(DatasetManifest { records, stage, lineage })
    }

    pub fn has_operation(&self, op: &str) -> bool {
        self.lineage.iter().any(|e| e.operation == op)
    }

    /// Writes the records as JSON Lines.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        write_jsonl(path, &self.records)
    }

    /// Writes `{stage, lineage, count}` next to a JSONL file.
    pub fn write_sidecar(&self, path: &Path) -> Result<(), CorpusError> {
        let doc = serde_json::json!({
            "stage": self.stage,
            "lineage": self.lineage,
            "count": self.records.len(),
        });
        std::fs::write(path, serde_json::to_string_pretty(&doc).expect("json") + "\n")
            .map_err(|e| CorpusError::io(path, e))
    }

    /// Reads records written by [`write_jsonl`](Self::write_jsonl), plus the
    /// sidecar when present.
    pub fn read_jsonl(path: &Path, sidecar: Option<&Path>) -> Result<DatasetManifest, CorpusError> {
        let records: Vec<Sample> = read_jsonl(path)?;
        let (stage, lineage) = match sidecar.filter(|p| p.exists()) {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CorpusError::io(p, e))?;
                #[derive(Deserialize)]
                struct Side {
                    stage: Stage,
                    lineage: Vec<LineageEntry>,
                }
                let side: Side = serde_json::from_str(&text)
                    .map_err(|e| CorpusError::Parse { line: 0, message: e.to_string() })?;
                (side.stage, side.lineage)
            }
            None => (Stage::Raw, Vec::new()),
        };
        Ok(DatasetManifest { records, stage, lineage })
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CorpusError> {
    let f = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for item in items {
        let line = serde_json::to_string(item).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| CorpusError::io(path, e))?;
    }
    w.flush().map_err(|e| CorpusError::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let f = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| CorpusError::Parse { line: i + 1, message: e.to_string() })?,
        );
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn sample(id: &str, domain: DomainTag) -> Sample {
        Sample {
            id: id.into(),
            question: format!("question {id}"),
            image_refs: vec![],
            gold_answer: "1".into(),
            domain,
            source: "unit".into(),
            meta: BTreeMap::new(),
        }
    }

    #[test]
    fn domain_tag_round_trips_through_strings() {
        for tag in [DomainTag::GeneralVqa, DomainTag::Chart, DomainTag::Other("geometry".into())] {
            let s = serde_json::to_string(&tag).unwrap();
            let back: DomainTag = serde_json::from_str(&s).unwrap();
            assert_eq!(back, tag);
        }
        assert_eq!(serde_json::to_string(&DomainTag::TxtMath).unwrap(), "\"txt_math\"");
    }

    #[test]
    fn sample_uses_wire_field_names() {
        let v = serde_json::to_value(sample("a", DomainTag::Science)).unwrap();
        for key in ["id", "question", "images", "answer", "domain", "source", "meta"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn stage_cannot_regress() {
        let m = DatasetManifest::new(vec![], Stage::Deduped);
        let err = m.derive(vec![], Stage::Formatted, "x", &serde_json::json!({}), BTreeMap::new());
        assert!(matches!(err, Err(CorpusError::StageRegression { .. })));
        let ok = m.derive(vec![], Stage::Curated, "x", &serde_json::json!({}), BTreeMap::new()).unwrap();
        assert_eq!(ok.lineage.len(), 1);
        assert_eq!(ok.stage, Stage::Curated);
    }

    #[test]
    fn trace_verdict_moves_forward_once() {
        let mut t = ReasoningTrace::new("s", 0, "<think>a</think><answer>1</answer>").unwrap();
        assert_eq!(t.answer(), Some("1"));
        assert_eq!(t.think(), Some("a"));
        t.set_verdict(TraceVerdict::RulePass).unwrap();
        assert!(t.set_verdict(TraceVerdict::RuleFail).is_err());
        assert!(t.set_verdict(TraceVerdict::Unverified).is_err());
    }

    #[test]
    fn empty_trace_rejected() {
        assert!(matches!(ReasoningTrace::new("s", 0, "  "), Err(CorpusError::EmptyTrace)));
    }

    #[test]
    fn gold_for_verification_reattaches_alias() {
        let mut s = sample("a", DomainTag::Puzzle);
        s.gold_answer = "B".into();
        s.meta.insert(META_ANSWER_ALIAS.into(), "3".into());
        assert_eq!(s.gold_for_verification(), "B. 3");
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::new(vec![sample("a", DomainTag::Chart), sample("b", DomainTag::ImgMath)], Stage::Formatted);
        let p = dir.path().join("m.jsonl");
        let side = dir.path().join("m.meta.json");
        m.write_jsonl(&p).unwrap();
        m.write_sidecar(&side).unwrap();
        let back = DatasetManifest::read_jsonl(&p, Some(&side)).unwrap();
        assert_eq!(back, m);
    }
}
