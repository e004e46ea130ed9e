use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusError, DatasetManifest, DomainTag, Sample, Stage};
use crate::hashing::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    Malformed,
    MissingImage,
    DuplicateId,
}

#[derive(Debug, Clone)]
pub struct IngestReport {
    pub manifest: DatasetManifest,
    /// `(1-based line number, reason)` for every skipped line.
    pub skipped: Vec<(usize, SkipReason)>,
}

impl IngestReport {
    pub fn skip_count(&self) -> usize {
        self.skipped.len()
    }

    pub fn count(&self, reason: SkipReason) -> usize {
        self.skipped.iter().filter(|(_, r)| *r == reason).count()
    }
}

#[derive(Deserialize)]
struct RawRecord {
    #[serde(default)]
    id: Option<String>,
    question: String,
    answer: String,
    #[serde(default)]
    images: Vec<String>,
    #[serde(default)]
    domain: Option<DomainTag>,
    #[serde(default)]
    source: Option<String>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

/// Meta key listing the SHA-256 of each referenced image, in order.
pub const META_IMAGE_DIGESTS: &str = "image_sha256";

/// Reads a JSON Lines file into a raw-stage manifest.
///
/// Image paths are resolved against the file's directory and must exist.
/// Records without an `id` get `<source>-<line>`.
pub fn ingest_records(path: &Path, source: &str) -> Result<IngestReport, CorpusError> {
    let f = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut seen = HashSet::new();

    for (idx, line) in BufReader::new(f).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(_) => {
                skipped.push((lineno, SkipReason::Malformed));
                continue;
            }
        };
        if raw.answer.trim().is_empty() || raw.question.trim().is_empty() {
            skipped.push((lineno, SkipReason::Malformed));
            continue;
        }
        let mut digests = Vec::with_capacity(raw.images.len());
        let mut missing = false;
        for img in &raw.images {
            let p = base.join(img);
            match std::fs::read(&p) {
                Ok(bytes) => digests.push(sha256_hex(bytes)),
                Err(_) => {
                    missing = true;
                    break;
                }
            }
        }
        if missing {
            skipped.push((lineno, SkipReason::MissingImage));
            continue;
        }
        let id = raw.id.unwrap_or_else(|| format!("{source}-{lineno}"));
        if !seen.insert(id.clone()) {
            skipped.push((lineno, SkipReason::DuplicateId));
            continue;
        }
        let mut meta = raw.meta;
        if !digests.is_empty() {
            meta.insert(META_IMAGE_DIGESTS.into(), digests.join(","));
        }
        records.push(Sample {
            id,
            question: raw.question,
            image_refs: raw
                .images
                .iter()
                .map(|i| base.join(i).to_string_lossy().into_owned())
                .collect(),
            gold_answer: raw.answer,
            domain: raw.domain.unwrap_or_default(),
            source: raw.source.unwrap_or_else(|| source.to_string()),
            meta,
        });
    }

    let mut tallies = BTreeMap::new();
    tallies.insert("accepted".into(), records.len() as u64);
    tallies.insert("skipped".into(), skipped.len() as u64);
    let manifest = DatasetManifest::new(Vec::new(), Stage::Raw).derive(
        records,
        Stage::Raw,
        "ingest_records",
        &serde_json::json!({ "source": source }),
        tallies,
    )?;
    Ok(IngestReport { manifest, skipped })
}
