use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CorpusError, DatasetManifest, LineageEntry};

/// Nonnegative rational mixing weight.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Weight(BigRational);

impl Weight {
    pub fn new(numer: u64, denom: u64) -> Self {
        assert!(denom > 0, "weight denominator must be positive");
        Weight(BigRational::new(numer.into(), denom.into()))
    }

    pub fn integer(n: u64) -> Self {
        Weight::new(n, 1)
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }
}

impl fmt::Display for Weight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for Weight {
    type Err = String;

    /// Accepts `3`, `2/5` or `0.25`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || format!("invalid weight {s:?}");
        let v = if let Some((n, d)) = s.split_once('/') {
            let n: BigInt = n.trim().parse().map_err(|_| bad())?;
            let d: BigInt = d.trim().parse().map_err(|_| bad())?;
            if d.is_zero() {
                return Err(bad());
            }
            BigRational::new(n, d)
        } else if let Some((i, frac)) = s.split_once('.') {
            if !frac.chars().all(|c| c.is_ascii_digit()) {
                return Err(bad());
            }
            let digits: BigInt = format!("{i}{frac}").parse().map_err(|_| bad())?;
            let scale = num_traits::pow(BigInt::from(10), frac.len());
            BigRational::new(digits, scale)
        } else {
            BigRational::from_integer(s.parse::<BigInt>().map_err(|_| bad())?)
        };
        if v.is_negative() {
            return Err(bad());
        }
        Ok(Weight(v))
    }
}

/// Largest-remainder split of `total` over `weights`, capped by `sizes`.
/// Parts whose cap binds are fixed at their size and the rest is re-split.
fn apportion(total: usize, weights: &[BigRational], sizes: &[usize]) -> Vec<usize> {
    let n = weights.len();
    let mut quota = vec![0usize; n];
    let mut active: Vec<usize> = (0..n).filter(|&i| !weights[i].is_zero()).collect();
    let mut remaining = total;
    loop {
        if active.is_empty() || remaining == 0 {
            return quota;
        }
        let wsum: BigRational = active.iter().map(|&i| weights[i].clone()).sum();
        let exact: Vec<BigRational> = active
            .iter()
            .map(|&i| BigRational::from_integer(remaining.into()) * &weights[i] / &wsum)
            .collect();
        let capped: Vec<usize> = active
            .iter()
            .zip(&exact)
            .filter(|(&i, q)| **q > BigRational::from_integer(sizes[i].into()))
            .map(|(&i, _)| i)
            .collect();
        if !capped.is_empty() {
            for &i in &capped {
                quota[i] = sizes[i];
                remaining -= sizes[i];
            }
            active.retain(|i| !capped.contains(i));
            continue;
        }
        let floors: Vec<usize> = exact.iter().map(|q| q.floor().to_integer().to_usize().unwrap()).collect();
        let mut left = remaining - floors.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..active.len()).collect();
        // Largest fractional part first; ties go to the earlier part.
        order.sort_by(|&a, &b| {
            let ra = &exact[a] - exact[a].floor();
            let rb = &exact[b] - exact[b].floor();
            rb.cmp(&ra).then(a.cmp(&b))
        });
        for (k, &i) in active.iter().enumerate() {
            quota[i] = floors[k];
        }
        for &k in &order {
            if left == 0 {
                break;
            }
            let i = active[k];
            if quota[i] < sizes[i] {
                quota[i] += 1;
                left -= 1;
            }
        }
        return quota;
    }
}

/// Deterministic weighted interleave of several manifests.
///
/// The output holds `min(limit, Σ sizes)` records, where only parts with a
/// positive weight contribute. Per-part counts follow largest-remainder
/// apportionment of the weights, each part contributes a prefix of its own
/// order, and parts are interleaved by smooth weighted round-robin so every
/// prefix of the output stays within one record of the proportional split.
/// The seed only breaks round-robin ties.
pub fn mix_domains(
    parts: &[(DatasetManifest, Weight)],
    seed: u64,
    limit: Option<usize>,
) -> Result<DatasetManifest, CorpusError> {
    if parts.is_empty() {
        return Err(CorpusError::NoParts);
    }
    if parts.iter().all(|(_, w)| w.is_zero()) {
        return Err(CorpusError::ZeroWeights);
    }
    let mut ids = HashSet::new();
    for (m, _) in parts {
        for r in &m.records {
            if !ids.insert(r.id.as_str()) {
                return Err(CorpusError::DuplicateId(r.id.clone()));
            }
        }
    }
    let weights: Vec<BigRational> = parts.iter().map(|(_, w)| w.0.clone()).collect();
    let sizes: Vec<usize> = parts.iter().map(|(m, _)| m.len()).collect();
    let available: usize = parts.iter().filter(|(_, w)| !w.is_zero()).map(|(m, _)| m.len()).sum();
    let total = limit.map_or(available, |l| l.min(available));
    let quota = apportion(total, &weights, &sizes);

    let mut priority: Vec<usize> = (0..parts.len()).collect();
    priority.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut rank = vec![0usize; parts.len()];
    for (r, &i) in priority.iter().enumerate() {
        rank[i] = r;
    }

    let mut credit = vec![0i64; parts.len()];
    let mut taken = vec![0usize; parts.len()];
    let mut records = Vec::with_capacity(total);
    for _ in 0..total {
        for (i, c) in credit.iter_mut().enumerate() {
            *c += quota[i] as i64;
        }
        let pick = (0..parts.len())
            .filter(|&i| taken[i] < quota[i])
            .max_by(|&a, &b| credit[a].cmp(&credit[b]).then(rank[b].cmp(&rank[a])))
            .expect("quota remaining");
        credit[pick] -= total as i64;
        records.push(parts[pick].0.records[taken[pick]].clone());
        taken[pick] += 1;
    }

    let stage = parts.iter().map(|(m, _)| m.stage).max().expect("non-empty");
    let mut lineage: Vec<LineageEntry> = Vec::new();
    for (m, _) in parts {
        for e in &m.lineage {
            if !lineage.contains(e) {
                lineage.push(e.clone());
            }
        }
    }
    let base = DatasetManifest { records: Vec::new(), stage, lineage };
    let mut tallies = BTreeMap::new();
    for (i, q) in quota.iter().enumerate() {
        tallies.insert(format!("part{i}"), *q as u64);
    }
    let params = serde_json::json!({
        "weights": parts.iter().map(|(_, w)| w.to_string()).collect::<Vec<_>>(),
        "seed": seed,
        "limit": limit,
    });
    base.derive(records, stage, "mix_domains", &params, tallies)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::sample;
    use crate::corpus::{DomainTag, Stage};

    fn part(prefix: &str, n: usize, domain: DomainTag) -> DatasetManifest {
        DatasetManifest::new(
            (0..n).map(|i| sample(&format!("{prefix}{i:03}"), domain.clone())).collect(),
            Stage::Curated,
        )
    }

    fn r(n: i64, d: i64) -> BigRational {
        BigRational::new(n.into(), d.into())
    }

    #[test]
    fn weight_parsing() {
        assert_eq!("2".parse::<Weight>().unwrap(), Weight::integer(2));
        assert_eq!("1/3".parse::<Weight>().unwrap(), Weight::new(1, 3));
        assert_eq!("0.25".parse::<Weight>().unwrap(), Weight::new(1, 4));
        assert!("-1".parse::<Weight>().is_err());
        assert!("1/0".parse::<Weight>().is_err());
        assert!("abc".parse::<Weight>().is_err());
    }

    #[test]
    fn apportion_examples() {
        assert_eq!(apportion(15, &[r(2, 1), r(1, 1)], &[20, 20]), vec![10, 5]);
        assert_eq!(apportion(10, &[r(1, 1), r(1, 1), r(1, 1)], &[9, 9, 9]), vec![4, 3, 3]);
        // cap binds on the small part, remainder goes to the other
        assert_eq!(apportion(12, &[r(1, 1), r(1, 1)], &[2, 20]), vec![2, 10]);
        assert_eq!(apportion(5, &[r(0, 1), r(1, 1)], &[9, 9]), vec![0, 5]);
    }

    #[test]
    fn equal_weights_alternate() {
        let a = part("a", 10, DomainTag::ImgMath);
        let b = part("b", 10, DomainTag::TxtMath);
        let m = mix_domains(&[(a, Weight::integer(1)), (b, Weight::integer(1))], 7, None).unwrap();
        assert_eq!(m.len(), 20);
        let mut na = 0i64;
        for (k, s) in m.records.iter().enumerate() {
            if s.domain == DomainTag::ImgMath {
                na += 1;
            }
            let expected = (k as i64 + 1) as f64 / 2.0;
            assert!((na as f64 - expected).abs() <= 1.0, "prefix {k}");
        }
    }

    #[test]
    fn single_part_is_identity_order() {
        let a = part("a", 6, DomainTag::Chart);
        let m = mix_domains(&[(a.clone(), Weight::integer(3))], 1, None).unwrap();
        assert_eq!(m.records, a.records);
    }

    #[test]
    fn truncated_proportional_split() {
        let a = part("a", 20, DomainTag::ImgMath);
        let b = part("b", 20, DomainTag::TxtMath);
        let m = mix_domains(&[(a, Weight::integer(2)), (b, Weight::integer(1))], 3, Some(15)).unwrap();
        let na = m.records.iter().filter(|s| s.domain == DomainTag::ImgMath).count();
        assert_eq!((na, m.len() - na), (10, 5));
        assert_eq!(m.lineage.last().unwrap().operation, "mix_domains");
    }

    #[test]
    fn zero_weights_and_empty_rejected() {
        let a = part("a", 2, DomainTag::Chart);
        assert!(matches!(mix_domains(&[(a, Weight::integer(0))], 0, None), Err(CorpusError::ZeroWeights)));
        assert!(matches!(mix_domains(&[], 0, None), Err(CorpusError::NoParts)));
    }

    #[test]
    fn shared_ids_rejected() {
        let a = part("a", 2, DomainTag::Chart);
        let res = mix_domains(&[(a.clone(), Weight::integer(1)), (a, Weight::integer(1))], 0, None);
        assert!(matches!(res, Err(CorpusError::DuplicateId(_))));
    }
}
