//! Desk-scale RL harness: synthetic arithmetic tasks, a tabular
//! autoregressive softmax policy, rollouts, exact gradients, a
//! finite-difference oracle and a training loop over the three objectives.

mod grad;
mod policy;
mod reflection;
mod tasks;
mod train;

use thiserror::Error;

use crate::rlcore::RlError;

pub use grad::{
    analytic_gradient, finite_difference_oracle, near_clip_boundary, objective_at, oracle_instance, oracle_suite,
    relabel, rollout, OracleInstance, OracleReport, RolloutConfig, ToyGroup,
};
pub use policy::{
    encode_answer, log_softmax_at, prompt_key, render, softmax_t, Context, Logits, ParamMap, Sampled,
    SoftmaxSequencePolicy, V, VOCAB,
};
pub use reflection::{reflection_ratio, ReflectionStats, DEFAULT_LEXICON};
pub use tasks::{generate_tasks, generate_tasks_with, DifficultyMix, SyntheticTask, TaskKind, DEFAULT_CHOICE_FRACTION};
pub use train::{reward_summary, train_loop, RewardSummary, RolloutRecord, TrainConfig};

#[derive(Debug, Error)]
pub enum ToyError {
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("reflection lexicon is empty")]
    EmptyLexicon,
    #[error("non-finite {metric} at step {step}; offending group: {dump}")]
    NonFinite { step: usize, metric: String, dump: String },
}
