use omr_core::distill::PassRateTable;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RlError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    pub enabled: bool,
    pub buckets: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig { enabled: false, buckets: 4 }
    }
}

/// Eligible ids for `epoch`, shuffled under `seed`.
///
/// Ids are ordered easy to hard by pass rate (ids with no attempts go last),
/// cut into `buckets` contiguous near-equal buckets, and epoch `e` draws from
/// buckets `0..=min(e, buckets − 1)`.
pub fn curriculum_schedule(
    table: &PassRateTable,
    ids: &[String],
    buckets: usize,
    epoch: usize,
    seed: u64,
) -> Result<Vec<String>, RlError> {
    if buckets == 0 {
        return Err(RlError::ZeroBuckets);
    }
    let mut ordered: Vec<(Option<f64>, &String)> = ids.iter().map(|id| (table.pass_rate(id), id)).collect();
    ordered.sort_by(|(pa, ia), (pb, ib)| match (pa, pb) {
        (Some(a), Some(b)) => b.total_cmp(a).then(ia.cmp(ib)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => ia.cmp(ib),
    });
    let last = epoch.min(buckets - 1);
    let end = (last + 1) * ordered.len() / buckets;
    let mut eligible: Vec<String> = ordered[..end].iter().map(|(_, id)| (*id).clone()).collect();
    eligible.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ epoch as u64));
    Ok(eligible)
}
