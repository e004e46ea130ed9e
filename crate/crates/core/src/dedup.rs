//! Near-duplicate removal by MinHash text similarity and dHash image
//! similarity.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use image::imageops::FilterType;
use image::GrayImage;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{CorpusError, DatasetManifest, Stage};
use crate::hashing::{fnv1a64, mix64};

pub const NUM_HASHES: usize = 128;
pub const BANDS: usize = 16;
pub const ROWS: usize = 8;
pub const DEFAULT_TEXT_THRESH: f64 = 0.85;
pub const DEFAULT_IMG_HAMMING: u32 = 8;

const CACHE_MAGIC: &[u8; 6] = b"OMRSIG";
const CACHE_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum DedupError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("cannot decode image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("signature cache {path}: {message}")]
    Cache { path: PathBuf, message: String },
    #[error("clusters do not partition the manifest: {0}")]
    NotPartition(String),
    #[error("text threshold {0} outside [0, 1]")]
    BadThreshold(f64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextSignature {
    pub minhash: [u64; NUM_HASHES],
    pub shingle_count: usize,
}

impl TextSignature {
    pub fn is_empty(&self) -> bool {
        self.shingle_count == 0
    }

    /// Fraction of agreeing positions; 0 when either side is empty.
    pub fn jaccard(&self, other: &TextSignature) -> f64 {
        if self.is_empty() || other.is_empty() {
            return 0.0;
        }
        let same = self.minhash.iter().zip(&other.minhash).filter(|(a, b)| a == b).count();
        same as f64 / NUM_HASHES as f64
    }
}

fn hash_seeds() -> &'static [u64; NUM_HASHES] {
    static SEEDS: std::sync::OnceLock<[u64; NUM_HASHES]> = std::sync::OnceLock::new();
    SEEDS.get_or_init(|| std::array::from_fn(|k| mix64(0x6d69_6e68_6173_6800 ^ k as u64)))
}

/// Lowercased word 3-grams with punctuation removed. Texts of one or two
/// words yield a single shingle.
pub fn shingles(t: &str) -> BTreeSet<String> {
    let cleaned: String = t
        .chars()
        .map(|c| if c.is_alphanumeric() { c.to_lowercase().next().unwrap_or(c) } else { ' ' })
        .collect();
    let words: Vec<&str> = cleaned.split_whitespace().collect();
    if words.is_empty() {
        return BTreeSet::new();
    }
    if words.len() < 3 {
        return std::iter::once(words.join(" ")).collect();
    }
    words.windows(3).map(|w| w.join(" ")).collect()
}

pub fn text_signature(t: &str) -> TextSignature {
    let sh = shingles(t);
    let mut minhash = [u64::MAX; NUM_HASHES];
    let seeds = hash_seeds();
    for s in &sh {
        let base = fnv1a64(s.as_bytes());
        for (m, seed) in minhash.iter_mut().zip(seeds) {
            *m = (*m).min(mix64(base ^ seed));
        }
    }
    TextSignature { minhash, shingle_count: sh.len() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ImageSignature {
    pub dhash64: u64,
}

impl ImageSignature {
    pub fn hamming(self, other: ImageSignature) -> u32 {
        (self.dhash64 ^ other.dhash64).count_ones()
    }
}

/// dHash of an 8-bit grayscale image: bilinear resize to 9×8, bit set when
/// a pixel is brighter than its right neighbour, row-major.
pub fn dhash_gray(img: &GrayImage) -> ImageSignature {
    let small = image::imageops::resize(img, 9, 8, FilterType::Triangle);
    let mut h = 0u64;
    for y in 0..8 {
        for x in 0..8 {
            let l = small.get_pixel(x, y)[0];
            let r = small.get_pixel(x + 1, y)[0];
            h = (h << 1) | u64::from(l > r);
        }
    }
    ImageSignature { dhash64: h }
}

pub fn image_signature(path: &Path) -> Result<ImageSignature, DedupError> {
    let img = image::open(path).map_err(|e| DedupError::Image { path: path.to_path_buf(), message: e.to_string() })?;
    Ok(dhash_gray(&img.to_luma8()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum CacheEntry {
    Text(TextSignature),
    Image(ImageSignature),
}

/// Content-addressed signature cache persisted as a versioned binary file.
#[derive(Debug, Default)]
pub struct SignatureCache {
    entries: Mutex<HashMap<[u8; 32], CacheEntry>>,
    hits: std::sync::atomic::AtomicUsize,
}

fn content_key(kind: u8, data: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update([kind]);
    h.update(data);
    h.finalize().into()
}

impl SignatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads `path`, or starts empty when it does not exist.
    pub fn load(path: &Path) -> Result<Self, DedupError> {
        if !path.exists() {
            return Ok(Self::new());
        }
        let bad = |message: String| DedupError::Cache { path: path.to_path_buf(), message };
        let f = File::open(path).map_err(|e| bad(e.to_string()))?;
        let mut r = BufReader::new(f);
        let res: std::io::Result<Result<HashMap<[u8; 32], CacheEntry>, String>> = (|| {
            let mut magic = [0u8; 6];
            r.read_exact(&mut magic)?;
            if &magic != CACHE_MAGIC {
                return Ok(Err("bad magic".to_string()));
            }
            let version = r.read_u16::<LittleEndian>()?;
            if version != CACHE_VERSION {
                return Ok(Err(format!("unsupported version {version}")));
            }
            let n = r.read_u64::<LittleEndian>()?;
            let mut map = HashMap::new();
            for _ in 0..n {
                let kind = r.read_u8()?;
                let mut key = [0u8; 32];
                r.read_exact(&mut key)?;
                let entry = match kind {
                    0 => {
                        let shingle_count = r.read_u64::<LittleEndian>()? as usize;
                        let mut minhash = [0u64; NUM_HASHES];
                        r.read_u64_into::<LittleEndian>(&mut minhash)?;
                        CacheEntry::Text(TextSignature { minhash, shingle_count })
                    }
                    1 => CacheEntry::Image(ImageSignature { dhash64: r.read_u64::<LittleEndian>()? }),
                    k => return Ok(Err(format!("unknown entry kind {k}"))),
                };
                map.insert(key, entry);
            }
            Ok(Ok(map))
        })();
        let map = res.map_err(|e| bad(e.to_string()))?.map_err(bad)?;
        Ok(SignatureCache { entries: Mutex::new(map), ..Default::default() })
    }

    pub fn save(&self, path: &Path) -> Result<(), DedupError> {
        let bad = |e: std::io::Error| DedupError::Cache { path: path.to_path_buf(), message: e.to_string() };
        let entries = self.entries.lock().unwrap();
        let mut keys: Vec<&[u8; 32]> = entries.keys().collect();
        keys.sort();
        let mut w = BufWriter::new(File::create(path).map_err(bad)?);
        let res: std::io::Result<()> = (|| {
            w.write_all(CACHE_MAGIC)?;
            w.write_u16::<LittleEndian>(CACHE_VERSION)?;
            w.write_u64::<LittleEndian>(keys.len() as u64)?;
            for k in keys {
                match &entries[k] {
                    CacheEntry::Text(s) => {
                        w.write_u8(0)?;
                        w.write_all(k)?;
                        w.write_u64::<LittleEndian>(s.shingle_count as u64)?;
                        for &v in &s.minhash {
                            w.write_u64::<LittleEndian>(v)?;
                        }
                    }
                    CacheEntry::Image(s) => {
                        w.write_u8(1)?;
                        w.write_all(k)?;
                        w.write_u64::<LittleEndian>(s.dhash64)?;
                    }
                }
            }
            w.flush()
        })();
        res.map_err(bad)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of lookups served from the cache.
    pub fn hits(&self) -> usize {
        self.hits.load(std::sync::atomic::Ordering::Relaxed)
    }

    fn lookup(&self, key: &[u8; 32]) -> Option<CacheEntry> {
        let e = self.entries.lock().unwrap().get(key).cloned();
        if e.is_some() {
            self.hits.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        }
        e
    }

    fn store(&self, key: [u8; 32], e: CacheEntry) {
        self.entries.lock().unwrap().insert(key, e);
    }

    pub fn text(&self, t: &str) -> TextSignature {
        let key = content_key(0, t.as_bytes());
        if let Some(CacheEntry::Text(s)) = self.lookup(&key) {
            return s;
        }
        let s = text_signature(t);
        self.store(key, CacheEntry::Text(s.clone()));
        s
    }

    pub fn image(&self, path: &Path) -> Result<ImageSignature, DedupError> {
        let bytes =
            std::fs::read(path).map_err(|e| DedupError::Image { path: path.to_path_buf(), message: e.to_string() })?;
        let key = content_key(1, &bytes);
        if let Some(CacheEntry::Image(s)) = self.lookup(&key) {
            return Ok(s);
        }
        let img = image::load_from_memory(&bytes)
            .map_err(|e| DedupError::Image { path: path.to_path_buf(), message: e.to_string() })?;
        let s = dhash_gray(&img.to_luma8());
        self.store(key, CacheEntry::Image(s));
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordSignature {
    pub text: TextSignature,
    pub images: Vec<ImageSignature>,
}

/// Signatures for every record, computed in parallel.
pub fn compute_signatures(m: &DatasetManifest, cache: &SignatureCache) -> Result<Vec<RecordSignature>, DedupError> {
    m.records
        .par_iter()
        .map(|s| {
            let images = s.image_refs.iter().map(|p| cache.image(Path::new(p))).collect::<Result<_, _>>()?;
            Ok(RecordSignature { text: cache.text(&s.question), images })
        })
        .collect()
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Candidate text pairs: records sharing at least one full LSH band.
pub fn lsh_text_candidates(sigs: &[&TextSignature]) -> BTreeSet<(usize, usize)> {
    let mut buckets: HashMap<(usize, u64), Vec<usize>> = HashMap::new();
    for (i, s) in sigs.iter().enumerate() {
        if s.is_empty() {
            continue;
        }
        for b in 0..BANDS {
            let band = &s.minhash[b * ROWS..(b + 1) * ROWS];
            let key = band.iter().fold(0u64, |h, &v| mix64(h ^ v));
            buckets.entry((b, key)).or_default().push(i);
        }
    }
    pairs_from_buckets(buckets.into_values())
}

/// Candidate image pairs within `max_dist` bits: splitting the 64 bits into
/// `max_dist + 1` chunks guarantees such a pair agrees on some chunk.
fn image_candidates(sigs: &[(usize, ImageSignature)], max_dist: u32) -> BTreeSet<(usize, usize)> {
    let chunks = (max_dist as usize + 1).min(64);
    let mut buckets: HashMap<(usize, u64), Vec<usize>> = HashMap::new();
    for &(rec, s) in sigs {
        for c in 0..chunks {
            let lo = c * 64 / chunks;
            let hi = (c + 1) * 64 / chunks;
            let width = hi - lo;
            let mask = if width == 64 { u64::MAX } else { (1u64 << width) - 1 };
            buckets.entry((c, (s.dhash64 >> lo) & mask)).or_default().push(rec);
        }
    }
    pairs_from_buckets(buckets.into_values())
}

fn pairs_from_buckets(buckets: impl Iterator<Item = Vec<usize>>) -> BTreeSet<(usize, usize)> {
    let mut out = BTreeSet::new();
    for mut members in buckets {
        members.sort_unstable();
        members.dedup();
        for (k, &a) in members.iter().enumerate() {
            for &b in &members[k + 1..] {
                out.insert((a, b));
            }
        }
    }
    out
}

fn min_hamming(a: &[ImageSignature], b: &[ImageSignature]) -> Option<u32> {
    a.iter().flat_map(|x| b.iter().map(move |y| x.hamming(*y))).min()
}

/// Connected components of the near-duplicate graph. Each cluster lists its
/// ids sorted; clusters are sorted by their first id.
pub fn cluster_signatures(
    ids: &[&str],
    sigs: &[RecordSignature],
    text_thresh: f64,
    img_thresh: u32,
) -> Result<Vec<Vec<String>>, DedupError> {
    if !(0.0..=1.0).contains(&text_thresh) {
        return Err(DedupError::BadThreshold(text_thresh));
    }
    let texts: Vec<&TextSignature> = sigs.iter().map(|s| &s.text).collect();
    let mut candidates = lsh_text_candidates(&texts);
    let imgs: Vec<(usize, ImageSignature)> =
        sigs.iter().enumerate().flat_map(|(i, s)| s.images.iter().map(move |&h| (i, h))).collect();
    candidates.extend(image_candidates(&imgs, img_thresh));

    let mut uf = UnionFind((0..ids.len()).collect());
    for (a, b) in candidates {
        let text_link = sigs[a].text.jaccard(&sigs[b].text) >= text_thresh && !sigs[a].text.is_empty();
        let img_link = min_hamming(&sigs[a].images, &sigs[b].images).is_some_and(|d| d <= img_thresh);
        if text_link || img_link {
            uf.union(a, b);
        }
    }
    let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for i in 0..ids.len() {
        let r = uf.find(i);
        groups.entry(r).or_default().push(ids[i].to_string());
    }
    let mut clusters: Vec<Vec<String>> = groups
        .into_values()
        .map(|mut g| {
            g.sort();
            g
        })
        .collect();
    clusters.sort();
    Ok(clusters)
}

pub fn near_dup_clusters(
    m: &DatasetManifest,
    text_thresh: f64,
    img_thresh: u32,
    cache: &SignatureCache,
) -> Result<Vec<Vec<String>>, DedupError> {
    let sigs = compute_signatures(m, cache)?;
    let ids: Vec<&str> = m.records.iter().map(|s| s.id.as_str()).collect();
    cluster_signatures(&ids, &sigs, text_thresh, img_thresh)
}

/// Keeps the lowest id of each cluster, preserving manifest order.
pub fn dedup_pass(m: &DatasetManifest, clusters: &[Vec<String>]) -> Result<DatasetManifest, DedupError> {
    let mut owner: HashMap<&str, usize> = HashMap::new();
    for (c, members) in clusters.iter().enumerate() {
        for id in members {
            if owner.insert(id.as_str(), c).is_some() {
                return Err(DedupError::NotPartition(format!("{id} appears twice")));
            }
        }
    }
    if owner.len() != m.len() {
        return Err(DedupError::NotPartition(format!("{} ids clustered for {} records", owner.len(), m.len())));
    }
    let mut keep = BTreeSet::new();
    for members in clusters {
        if let Some(min) = members.iter().min() {
            keep.insert(min.as_str());
        }
    }
    for s in &m.records {
        if !owner.contains_key(s.id.as_str()) {
            return Err(DedupError::NotPartition(format!("{} missing", s.id)));
        }
    }
    let records: Vec<_> = m.records.iter().filter(|s| keep.contains(s.id.as_str())).cloned().collect();
    let removed = m.len() - records.len();
    if removed == 0 && m.stage == Stage::Deduped {
        return Ok(m.clone());
    }
    let mut tallies = BTreeMap::new();
    tallies.insert("removed".into(), removed as u64);
    tallies.insert("clusters".into(), clusters.len() as u64);
    Ok(m.derive(records, Stage::Deduped, "dedup", &serde_json::json!({}), tallies)?)
}
