//! Length and difficulty filters, and greedy stream packing into fixed
//! token budgets.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, DatasetManifest, ReasoningTrace, Stage};
use crate::distill::PassRateTable;
use crate::tokenizer::{encode, TokenId};

pub const DEFAULT_CAPACITY: usize = 61_440;

const PACK_MAGIC: &[u8; 8] = b"OMRPACK\0";
const PACK_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CurateError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("capacity must be positive")]
    ZeroCapacity,
    #[error("difficulty band [{lo}, {hi}] is not inside [0, 1]")]
    BadBand { lo: f64, hi: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

/// Keeps traces with at least `min_tokens` tokens.
pub fn length_filter(traces: &[ReasoningTrace], min_tokens: usize) -> Vec<ReasoningTrace> {
    traces.iter().filter(|t| t.token_len >= min_tokens).cloned().collect()
}

#[derive(Debug, Clone)]
pub struct DifficultyFiltered {
    pub manifest: DatasetManifest,
    /// Ids kept only because the table had no entry for them.
    pub unscored: Vec<String>,
}

/// Keeps samples whose `1 − pass_rate` lies in `[lo, hi]`. Samples with no
/// recorded attempts are kept and reported.
pub fn difficulty_filter(
    m: &DatasetManifest,
    table: &PassRateTable,
    lo: f64,
    hi: f64,
) -> Result<DifficultyFiltered, CurateError> {
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(CurateError::BadBand { lo, hi });
    }
    let mut unscored = Vec::new();
    let records: Vec<_> = m
        .records
        .iter()
        .filter(|s| match table.estimate_difficulty(&s.id) {
            Ok(d) => lo <= d && d <= hi,
            Err(_) => {
                unscored.push(s.id.clone());
                true
            }
        })
        .cloned()
        .collect();
    let mut tallies = BTreeMap::new();
    tallies.insert("removed".into(), (m.len() - records.len()) as u64);
    tallies.insert("unscored".into(), unscored.len() as u64);
    let stage = m.stage.max(Stage::Curated);
    let manifest = m.derive(records, stage, "difficulty_filter", &serde_json::json!({"lo": lo, "hi": hi}), tallies)?;
    Ok(DifficultyFiltered { manifest, unscored })
}

/// One tokenized sample headed for packing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackItem {
    pub sample_id: String,
    pub tokens: Vec<TokenId>,
}

impl From<&ReasoningTrace> for PackItem {
    fn from(t: &ReasoningTrace) -> Self {
        PackItem { sample_id: format!("{}#{}", t.sample_id, t.draw), tokens: encode(&t.body) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Boundary {
    pub sample_id: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBatch {
    pub token_ids: Vec<TokenId>,
    pub boundaries: Vec<Boundary>,
    pub capacity: usize,
}

impl PackedBatch {
    fn empty(capacity: usize) -> Self {
        PackedBatch { token_ids: Vec::new(), boundaries: Vec::new(), capacity }
    }

    pub fn fill(&self) -> usize {
        self.token_ids.len()
    }

    fn push(&mut self, item: PackItem) {
        let start = self.token_ids.len();
        self.token_ids.extend(item.tokens);
        self.boundaries.push(Boundary { sample_id: item.sample_id, start, end: self.token_ids.len() });
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overflow {
    pub sample_id: String,
    pub len: usize,
}

/// Greedy close-on-overflow packer over a stream of items.
pub struct PackStream<I> {
    items: I,
    capacity: usize,
    current: PackedBatch,
    overflow: Vec<Overflow>,
    done: bool,
}

pub fn pack_stream<I>(items: I, capacity: usize) -> Result<PackStream<I::IntoIter>, CurateError>
where
    I: IntoIterator<Item = PackItem>,
{
    if capacity == 0 {
        return Err(CurateError::ZeroCapacity);
    }
    Ok(PackStream {
        items: items.into_iter(),
        capacity,
        current: PackedBatch::empty(capacity),
        overflow: Vec::new(),
        done: false,
    })
}

impl<I> PackStream<I> {
    /// Samples rejected so far for exceeding the capacity.
    pub fn overflow(&self) -> &[Overflow] {
        &self.overflow
    }
}

impl<I: Iterator<Item = PackItem>> Iterator for PackStream<I> {
    type Item = PackedBatch;

    fn next(&mut self) -> Option<PackedBatch> {
        if self.done {
            return None;
        }
        for item in self.items.by_ref() {
            let len = item.tokens.len();
            if len > self.capacity {
                self.overflow.push(Overflow { sample_id: item.sample_id, len });
                continue;
            }
            if self.current.fill() + len > self.capacity {
                let full = std::mem::replace(&mut self.current, PackedBatch::empty(self.capacity));
                self.current.push(item);
                return Some(full);
            }
            self.current.push(item);
        }
        self.done = true;
        if self.current.boundaries.is_empty() {
            None
        } else {
            Some(std::mem::replace(&mut self.current, PackedBatch::empty(self.capacity)))
        }
    }
}

/// Packs every item, returning batches and the overflow report.
pub fn pack_all<I>(items: I, capacity: usize) -> Result<(Vec<PackedBatch>, Vec<Overflow>), CurateError>
where
    I: IntoIterator<Item = PackItem>,
{
    let mut stream = pack_stream(items, capacity)?;
    let batches: Vec<_> = stream.by_ref().collect();
    Ok((batches, stream.overflow))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackStats {
    pub batches: usize,
    pub total_fill: usize,
    pub total_capacity: usize,
    pub utilization: f64,
    /// True when there were no batches and utilization is a placeholder 0.
    pub empty: bool,
    pub overflow: usize,
}

pub fn pack_stats(batches: &[PackedBatch], overflow: &[Overflow]) -> PackStats {
    let total_fill: usize = batches.iter().map(|b| b.fill()).sum();
    let total_capacity: usize = batches.iter().map(|b| b.capacity).sum();
    let empty = batches.is_empty();
    PackStats {
        batches: batches.len(),
        total_fill,
        total_capacity,
        utilization: if empty { 0.0 } else { total_fill as f64 / total_capacity as f64 },
        empty,
        overflow: overflow.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub offset: u64,
    pub bytes: u64,
    pub capacity: usize,
    pub fill: usize,
    pub boundaries: Vec<Boundary>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackIndex {
    pub version: u32,
    pub batches: Vec<IndexEntry>,
}

fn io(p: &Path) -> impl Fn(std::io::Error) -> CurateError + '_ {
    move |source| CurateError::Io { path: p.to_path_buf(), source }
}

/// Writes batches as length-prefixed little-endian records and returns the
/// index, which is also written to `index_path`.
pub fn write_packed(path: &Path, index_path: &Path, batches: &[PackedBatch]) -> Result<PackIndex, CurateError> {
    let mut w = BufWriter::new(File::create(path).map_err(io(path))?);
    let mut index = PackIndex { version: PACK_VERSION, batches: Vec::new() };
    let mut offset = (PACK_MAGIC.len() + 4) as u64;
    let res: std::io::Result<()> = (|| {
        w.write_all(PACK_MAGIC)?;
        w.write_u32::<LittleEndian>(PACK_VERSION)?;
        for b in batches {
            let bytes = 4 + 4 * b.token_ids.len() as u64;
            w.write_u64::<LittleEndian>(bytes)?;
            w.write_u32::<LittleEndian>(b.capacity as u32)?;
            for &t in &b.token_ids {
                w.write_u32::<LittleEndian>(t)?;
            }
            index.batches.push(IndexEntry {
                offset,
                bytes,
                capacity: b.capacity,
                fill: b.fill(),
                boundaries: b.boundaries.clone(),
            });
            offset += 8 + bytes;
        }
        w.flush()
    })();
    res.map_err(io(path))?;
    let json = serde_json::to_string_pretty(&index).expect("index serializes");
    std::fs::write(index_path, json + "\n").map_err(io(index_path))?;
    Ok(index)
}

pub fn read_packed(path: &Path, index_path: &Path) -> Result<Vec<PackedBatch>, CurateError> {
    let bad = |message: String| CurateError::Format { path: path.to_path_buf(), message };
    let text = std::fs::read_to_string(index_path).map_err(io(index_path))?;
    let index: PackIndex = serde_json::from_str(&text)
        .map_err(|e| CurateError::Format { path: index_path.to_path_buf(), message: e.to_string() })?;
    let mut r = BufReader::new(File::open(path).map_err(io(path))?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io(path))?;
    if &magic != PACK_MAGIC {
        return Err(bad("not a packed batch file".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io(path))?;
    if version != PACK_VERSION || index.version != PACK_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut out = Vec::with_capacity(index.batches.len());
    for e in index.batches {
        r.seek(SeekFrom::Start(e.offset)).map_err(io(path))?;
        let bytes = r.read_u64::<LittleEndian>().map_err(io(path))?;
        if bytes != e.bytes || bytes < 4 || (bytes - 4) % 4 != 0 {
            return Err(bad(format!("record at {} has length {bytes}", e.offset)));
        }
        let capacity = r.read_u32::<LittleEndian>().map_err(io(path))? as usize;
        let n = ((bytes - 4) / 4) as usize;
        let mut token_ids = vec![0u32; n];
        r.read_u32_into::<LittleEndian>(&mut token_ids).map_err(io(path))?;
        if n != e.fill || capacity != e.capacity {
            return Err(bad(format!("record at {} disagrees with index", e.offset)));
        }
        out.push(PackedBatch { token_ids, boundaries: e.boundaries, capacity });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::PassCount;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn items(lens: &[usize]) -> Vec<PackItem> {
        lens.iter()
            .enumerate()
            .map(|(i, &n)| PackItem { sample_id: format!("s{i}"), tokens: vec![i as u32; n] })
            .collect()
    }

    fn fills(batches: &[PackedBatch]) -> Vec<usize> {
        batches.iter().map(|b| b.fill()).collect()
    }

    #[test]
    fn greedy_hand_trace() {
        let (b, o) = pack_all(items(&[4, 3, 5, 2, 6]), 10).unwrap();
        assert_eq!(fills(&b), vec![7, 7, 6]);
        assert!(o.is_empty());
        let s = pack_stats(&b, &o);
        assert!((s.utilization - 20.0 / 30.0).abs() < 1e-12);
    }

    #[test]
    fn exact_capacity_and_overflow() {
        let (b, o) = pack_all(items(&[10]), 10).unwrap();
        assert_eq!(fills(&b), vec![10]);
        assert_eq!(pack_stats(&b, &o).utilization, 1.0);
        let (b, o) = pack_all(items(&[3, 11, 4]), 10).unwrap();
        assert_eq!(fills(&b), vec![7]);
        assert_eq!(o, vec![Overflow { sample_id: "s1".into(), len: 11 }]);
    }

    #[test]
    fn empty_stream() {
        let (b, o) = pack_all(Vec::new(), 10).unwrap();
        let s = pack_stats(&b, &o);
        assert_eq!((s.batches, s.utilization, s.empty), (0, 0.0, true));
        assert!(matches!(pack_stream(Vec::new(), 0), Err(CurateError::ZeroCapacity)));
    }

    #[test]
    fn default_capacity() {
        assert_eq!(DEFAULT_CAPACITY, 61_440);
    }

    #[test]
    fn uniform_lengths_utilization() {
        let cap = 1024;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lens: Vec<usize> = (0..2000).map(|_| rng.gen_range(1..=cap / 4)).collect();
        let (b, o) = pack_all(items(&lens), cap).unwrap();
        let s = pack_stats(&b, &o);
        assert!(s.utilization >= 0.85, "{}", s.utilization);
    }

    #[test]
    fn length_filter_examples() {
        let traces: Vec<_> = [3usize, 10, 50]
            .iter()
            .map(|&n| ReasoningTrace::new("x", 0, "a ".repeat(n)).unwrap())
            .collect();
        assert_eq!(length_filter(&traces, 0), traces);
        let kept: Vec<usize> = length_filter(&traces, 10).iter().map(|t| t.token_len).collect();
        assert_eq!(kept, vec![10, 50]);
    }

    #[test]
    fn difficulty_band() {
        use crate::corpus::tests::sample;
        use crate::corpus::DomainTag;
        let m = DatasetManifest::new(
            ["a", "b", "c", "d"].iter().map(|id| sample(id, DomainTag::Chart)).collect(),
            Stage::Distilled,
        );
        let mut t = PassRateTable::default();
        t.entries.insert("a".into(), PassCount { attempts: 8, passes: 8 });
        t.entries.insert("b".into(), PassCount { attempts: 8, passes: 5 });
        t.entries.insert("c".into(), PassCount { attempts: 8, passes: 0 });
        let out = difficulty_filter(&m, &t, 0.1, 0.9).unwrap();
        let ids: Vec<&str> = out.manifest.records.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, vec!["b", "d"]);
        assert_eq!(out.unscored, vec!["d".to_string()]);
        let all = difficulty_filter(&m, &t, 0.0, 1.0).unwrap();
        assert_eq!(all.manifest.records, m.records);
        assert!(difficulty_filter(&m, &t, 0.9, 0.1).is_err());
    }

    #[test]
    fn binary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (b, _) = pack_all(items(&[4, 3, 5, 2, 6]), 10).unwrap();
        let p = dir.path().join("p.bin");
        let ix = dir.path().join("p.json");
        write_packed(&p, &ix, &b).unwrap();
        assert_eq!(read_packed(&p, &ix).unwrap(), b);
        std::fs::write(&p, b"garbage!garbage").unwrap();
        assert!(read_packed(&p, &ix).is_err());
    }

    proptest! {
        #[test]
        fn packing_invariants(lens in proptest::collection::vec(0usize..40, 0..60), cap in 1usize..32) {
            let input = items(&lens);
            let (batches, overflow) = pack_all(input.clone(), cap).unwrap();
            let packed: usize = batches.iter().map(|b| b.fill()).sum();
            let over: usize = overflow.iter().map(|o| o.len).sum();
            prop_assert_eq!(packed + over, lens.iter().sum::<usize>());
            let mut order = Vec::new();
            for b in &batches {
                prop_assert!(b.fill() <= b.capacity);
                let mut pos = 0;
                for bd in &b.boundaries {
                    prop_assert_eq!(bd.start, pos);
                    pos = bd.end;
                    order.push(bd.sample_id.clone());
                }
                prop_assert_eq!(pos, b.fill());
            }
            let expected: Vec<String> = input.iter().filter(|i| i.tokens.len() <= cap).map(|i| i.sample_id.clone()).collect();
            prop_assert_eq!(order, expected);
        }
    }
}
