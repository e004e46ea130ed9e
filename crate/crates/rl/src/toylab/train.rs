use omr_core::distill::PassRateTable;
use omr_core::hashing::mix64;
use omr_core::verify::Verifier;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grad::{analytic_gradient, rollout, RolloutConfig, ToyGroup};
use super::policy::SoftmaxSequencePolicy;
use super::reflection::{reflection_ratio, DEFAULT_LEXICON};
use super::tasks::SyntheticTask;
use super::ToyError;
use crate::rlcore::{
    assign_advantages, curriculum_schedule, dynamic_sample_filter, ClipConfig, CurriculumConfig, ObjectiveKind,
    RewardSpec, DEFAULT_STD_FLOOR,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    pub group_size: usize,
    pub temperature: f64,
    /// Groups per step.
    pub batch_groups: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Defaults to the objective's own clip band.
    pub clip: Option<ClipConfig>,
    pub reward: RewardSpec,
    pub max_tokens: usize,
    /// Gradient steps per sampled batch.
    pub inner_epochs: usize,
    pub std_floor: f64,
    pub curriculum: CurriculumConfig,
    /// Extra DAPO batches drawn when every group of a batch is filtered.
    pub resample_cap: usize,
    pub lexicon: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: ObjectiveKind::Gspo,
            group_size: 16,
            temperature: 1.0,
            batch_groups: 16,
            steps: 2000,
            lr: 200.0,
            seed: 0,
            clip: None,
            reward: RewardSpec { lambda_fmt: 0.1, l_max: 64, l_cache: 16 },
            max_tokens: 64,
            inner_epochs: 1,
            std_floor: DEFAULT_STD_FLOOR,
            curriculum: CurriculumConfig::default(),
            resample_cap: 4,
            lexicon: DEFAULT_LEXICON.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl TrainConfig {
    pub fn clip(&self) -> ClipConfig {
        self.clip.unwrap_or_else(|| ClipConfig::for_kind(self.objective))
    }

    fn rollout_config(&self) -> RolloutConfig {
        RolloutConfig {
            group_size: self.group_size,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            reward: self.reward,
        }
    }

    pub fn validate(&self) -> Result<(), ToyError> {
        let bad = |m: &str| Err(ToyError::BadConfig(m.into()));
        if self.steps == 0 {
            return bad("steps must be positive");
        }
        if self.group_size < 2 {
            return bad("group size must be at least 2");
        }
        if self.batch_groups == 0 || self.max_tokens == 0 || self.inner_epochs == 0 {
            return bad("batch_groups, max_tokens and inner_epochs must be positive");
        }
        if !(self.temperature > 0.0) || !self.lr.is_finite() || self.lr < 0.0 {
            return bad("temperature must be positive and lr finite and nonnegative");
        }
        if self.lexicon.is_empty() {
            return Err(ToyError::EmptyLexicon);
        }
        self.clip().validate()?;
        self.reward.validate()?;
        Ok(())
    }
}

/// Per-step summary of the sampled groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub step: usize,
    pub mean_reward: f64,
    pub accuracy: f64,
    pub entropy: f64,
    pub mean_length: f64,
    pub reflection_ratio: f64,
    pub groups_kept: usize,
    pub groups_filtered: usize,
    pub resamples: usize,
}

fn slot_rng(seed: u64, step: usize, attempt: usize, slot: usize) -> ChaCha8Rng {
    let k = mix64(mix64(mix64(seed) ^ step as u64) ^ attempt as u64) ^ slot as u64;
    ChaCha8Rng::seed_from_u64(mix64(k))
}

fn dump(g: &ToyGroup) -> String {
    serde_json::to_string(g).unwrap_or_else(|e| format!("<unserializable: {e}>"))
}

/// Runs `cfg.steps` steps of sample, score, filter (DAPO), advantage and a
/// fixed-step gradient ascent on `policy`.
pub fn train_loop(
    policy: &mut SoftmaxSequencePolicy,
    tasks: &[SyntheticTask],
    cfg: &TrainConfig,
) -> Result<Vec<RolloutRecord>, ToyError> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(ToyError::BadConfig("no tasks".into()));
    }
    policy.temperature = cfg.temperature;
    let clip = cfg.clip();
    let rcfg = cfg.rollout_config();
    let verifier = Verifier::rule_only();
    let lexicon: Vec<&str> = cfg.lexicon.iter().map(String::as_str).collect();
    let ids: Vec<String> = tasks.iter().map(|t| t.id.clone()).collect();
    let by_id: std::collections::HashMap<&str, &SyntheticTask> = tasks.iter().map(|t| (t.id.as_str(), t)).collect();
    let mut table = PassRateTable::default();
    let mut records = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let eligible: Vec<&SyntheticTask> = if cfg.curriculum.enabled {
            let epoch = step * cfg.batch_groups / tasks.len();
            curriculum_schedule(&table, &ids, cfg.curriculum.buckets, epoch, cfg.seed)?
                .iter()
                .map(|id| by_id[id.as_str()])
                .collect()
        } else {
            tasks.iter().collect()
        };
        let eligible = if eligible.is_empty() { tasks.iter().collect() } else { eligible };

        let mut sampled: Vec<ToyGroup> = Vec::new();
        let mut kept: Vec<ToyGroup> = Vec::new();
        let mut filtered = 0;
        let mut resamples = 0;
        for attempt in 0..=cfg.resample_cap {
            let mut pick = slot_rng(cfg.seed, step, attempt, usize::MAX);
            let batch: Vec<&SyntheticTask> =
                (0..cfg.batch_groups).map(|_| eligible[pick.gen_range(0..eligible.len())]).collect();
            let policy_ref = &*policy;
            let mut groups = batch
                .par_iter()
                .enumerate()
                .map(|(slot, task)| {
                    rollout(policy_ref, task, &rcfg, &verifier, &mut slot_rng(cfg.seed, step, attempt, slot))
                })
                .collect::<Result<Vec<_>, _>>()?;
            for g in &mut groups {
                assign_advantages(&mut g.group, cfg.std_floor)?;
                for r in &g.group.responses {
                    table.record(&g.task_id, r.correct);
                }
            }
            sampled.extend(groups.iter().cloned());
            if cfg.objective != ObjectiveKind::Dapo {
                kept = groups;
                break;
            }
            let (dyn_kept, _) = dynamic_sample_filter(groups.iter().map(|g| g.group.clone()).collect());
            let keep: Vec<ToyGroup> = groups
                .into_iter()
                .filter(|g| dyn_kept.iter().any(|k| k.query_id == g.group.query_id && k == &g.group))
                .filter(|g| g.group.responses.windows(2).any(|w| w[0].reward != w[1].reward))
                .collect();
            filtered += cfg.batch_groups - keep.len();
            if !keep.is_empty() {
                kept = keep;
                break;
            }
            if attempt < cfg.resample_cap {
                resamples += 1;
            }
        }

        if cfg.lr != 0.0 && !kept.is_empty() {
            for _ in 0..cfg.inner_epochs {
                let (_, grad) = analytic_gradient(policy, &kept, cfg.objective, &clip)?;
                if grad.values().flatten().any(|x| !x.is_finite()) {
                    return Err(ToyError::NonFinite { step, metric: "gradient".into(), dump: dump(&kept[0]) });
                }
                policy.ascend(&grad, cfg.lr);
            }
        }

        let responses: Vec<_> = sampled.iter().flat_map(|g| &g.group.responses).collect();
        let n = responses.len() as f64;
        let texts: Vec<&String> = sampled.iter().flat_map(|g| &g.texts).collect();
        let rec = RolloutRecord {
            step,
            mean_reward: responses.iter().map(|r| r.reward).sum::<f64>() / n,
            accuracy: responses.iter().filter(|r| r.correct).count() as f64 / n,
            entropy: sampled.iter().flat_map(|g| &g.entropies).sum::<f64>() / n,
            mean_length: responses.iter().map(|r| r.len() as f64).sum::<f64>() / n,
            reflection_ratio: reflection_ratio(&texts, &lexicon)?.ratio,
            groups_kept: kept.len(),
            groups_filtered: filtered,
            resamples,
        };
        for (metric, v) in [
            ("mean_reward", rec.mean_reward),
            ("entropy", rec.entropy),
            ("mean_length", rec.mean_length),
            ("reflection_ratio", rec.reflection_ratio),
        ] {
            if !v.is_finite() {
                let bad = sampled
                    .iter()
                    .find(|g| g.group.responses.iter().any(|r| !r.reward.is_finite()) || g.entropies.iter().any(|e| !e.is_finite()))
                    .unwrap_or(&sampled[0]);
                return Err(ToyError::NonFinite { step, metric: metric.into(), dump: dump(bad) });
            }
        }
        records.push(rec);
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSummary {
    /// Mean reward over the first `head` steps.
    pub initial: f64,
    /// Mean reward over the last `tail` steps.
    pub last: f64,
}

pub fn reward_summary(records: &[RolloutRecord], head: usize, tail: usize) -> Option<RewardSummary> {
    if records.is_empty() || head == 0 || tail == 0 {
        return None;
    }
    let mean = |rs: &[RolloutRecord]| rs.iter().map(|r| r.mean_reward).sum::<f64>() / rs.len() as f64;
    let head = head.min(records.len());
    let tail = tail.min(records.len());
    Some(RewardSummary { initial: mean(&records[..head]), last: mean(&records[records.len() - tail..]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toylab::tasks::{generate_tasks, DifficultyMix};

    fn small(objective: ObjectiveKind) -> TrainConfig {
        TrainConfig { objective, steps: 5, group_size: 4, batch_groups: 4, ..Default::default() }
    }

    #[test]
    fn zero_lr_leaves_policy_untouched() {
        let tasks = generate_tasks(10, 1, DifficultyMix::easy_only()).unwrap();
        let mut p = SoftmaxSequencePolicy::default();
        let before = p.clone();
        train_loop(&mut p, &tasks, &TrainConfig { lr: 0.0, ..small(ObjectiveKind::Grpo) }).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn reproducible_and_bounded() {
        let tasks = generate_tasks(10, 1, DifficultyMix::easy_only()).unwrap();
        for kind in ObjectiveKind::ALL {
            let (mut a, mut b) = (SoftmaxSequencePolicy::default(), SoftmaxSequencePolicy::default());
            let ra = train_loop(&mut a, &tasks, &small(kind)).unwrap();
            let rb = train_loop(&mut b, &tasks, &small(kind)).unwrap();
            assert_eq!(ra, rb);
            assert_eq!(a, b);
            assert!(ra.iter().all(|r| (-1.0..=1.0).contains(&r.mean_reward)));
        }
    }

    #[test]
    fn rejects_bad_config() {
        let tasks = generate_tasks(2, 1, DifficultyMix::easy_only()).unwrap();
        let mut p = SoftmaxSequencePolicy::default();
        assert!(train_loop(&mut p, &tasks, &TrainConfig { steps: 0, ..Default::default() }).is_err());
        assert!(matches!(
            train_loop(&mut p, &tasks, &TrainConfig { lexicon: vec![], ..Default::default() }),
            Err(ToyError::EmptyLexicon)
        ));
    }

    #[test]
    fn curriculum_runs() {
        let tasks = generate_tasks(12, 1, DifficultyMix::even()).unwrap();
        let cfg = TrainConfig { curriculum: CurriculumConfig { enabled: true, buckets: 3 }, ..small(ObjectiveKind::Gspo) };
        let recs = train_loop(&mut SoftmaxSequencePolicy::default(), &tasks, &cfg).unwrap();
        assert_eq!(recs.len(), 5);
    }

    #[test]
    fn summary_windows() {
        let recs: Vec<RolloutRecord> = (0..10)
            .map(|i| RolloutRecord {
                step: i,
                mean_reward: i as f64,
                accuracy: 0.0,
                entropy: 0.0,
                mean_length: 0.0,
                reflection_ratio: 0.0,
                groups_kept: 0,
                groups_filtered: 0,
                resamples: 0,
            })
            .collect();
        let s = reward_summary(&recs, 2, 3).unwrap();
        assert_eq!((s.initial, s.last), (0.5, 8.0));
        assert!(reward_summary(&[], 1, 1).is_none());
    }
}
