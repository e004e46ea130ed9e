use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DatasetManifest, ReasoningTrace};
use crate::tokenizer::count_tokens;

/// Power-of-two bucket lower bound: 0, 1, 2, 4, 8, …
pub fn length_bucket(len: usize) -> u64 {
    if len == 0 {
        0
    } else {
        1u64 << (usize::BITS - 1 - len.leading_zeros())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub records: usize,
    pub by_domain: BTreeMap<String, usize>,
    pub by_source: BTreeMap<String, usize>,
    /// Question token lengths, keyed by power-of-two bucket lower bound.
    pub question_tokens: BTreeMap<u64, usize>,
    pub traces: usize,
    pub trace_tokens: BTreeMap<u64, usize>,
    pub verdicts: BTreeMap<String, usize>,
}

impl CorpusStats {
    pub fn with_traces(mut self, traces: &[ReasoningTrace]) -> Self {
        self.traces += traces.len();
        for t in traces {
            *self.trace_tokens.entry(length_bucket(t.token_len)).or_default() += 1;
            *self.verdicts.entry(t.verdict.as_str().to_string()).or_default() += 1;
        }
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize") + "\n"
    }
}

pub fn corpus_stats(m: &DatasetManifest) -> CorpusStats {
    let mut s = CorpusStats { records: m.len(), ..Default::default() };
    for r in &m.records {
        *s.by_domain.entry(r.domain.to_string()).or_default() += 1;
        *s.by_source.entry(r.source.clone()).or_default() += 1;
        *s.question_tokens.entry(length_bucket(count_tokens(&r.question))).or_default() += 1;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::sample;
    use crate::corpus::{DomainTag, Stage};

    #[test]
    fn buckets() {
        let got: Vec<u64> = [0, 1, 2, 3, 4, 7, 8, 1000].iter().map(|&n| length_bucket(n)).collect();
        assert_eq!(got, vec![0, 1, 2, 2, 4, 4, 8, 512]);
    }

    #[test]
    fn empty_manifest_is_all_zero() {
        let s = corpus_stats(&DatasetManifest::new(vec![], Stage::Raw));
        assert_eq!(s, CorpusStats::default());
    }

    #[test]
    fn domain_counts() {
        let m = DatasetManifest::new(
            vec![
                sample("a", DomainTag::Chart),
                sample("b", DomainTag::Chart),
                sample("c", DomainTag::Science),
            ],
            Stage::Raw,
        );
        let s = corpus_stats(&m);
        assert_eq!(s.by_domain["chart"], 2);
        assert_eq!(s.by_domain["science"], 1);
        assert_eq!(s.by_domain.values().sum::<usize>(), 3);
        assert_eq!(s.by_source.values().sum::<usize>(), 3);
        assert_eq!(s.question_tokens.values().sum::<usize>(), 3);
    }
}
