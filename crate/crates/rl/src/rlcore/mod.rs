//! Rewards, group-relative advantages, importance ratios, the clipped
//! GRPO/DAPO/GSPO objectives with analytic gradients, dynamic sampling,
//! entropy and the curriculum schedule.
//!
//! Everything here is a pure function over explicit log-probability arrays.

mod advantage;
mod curriculum;
mod objective;
mod reward;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use advantage::{assign_advantages, group_advantages, AdvantageSet, DEFAULT_STD_FLOOR};
pub use curriculum::{curriculum_schedule, CurriculumConfig};
pub use objective::{
    clipped_term, dapo_objective, grpo_objective, gspo_objective, objective, sequence_importance_ratio,
    token_importance_ratios, ObjectiveKind, ObjectiveOutput,
};
pub use reward::{
    composite_reward, format_ok, overlength_penalty, reward_from_parts, RewardParts, RewardSpec,
};

use omr_core::verify::VerifyError;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("group {0} has fewer than 2 responses")]
    GroupTooSmall(String),
    #[error("response {response} of group {group}: {tokens} tokens but {new} new / {old} old log-probabilities")]
    LengthMismatch { group: String, response: usize, tokens: usize, new: usize, old: usize },
    #[error("response {response} of group {group} is empty")]
    EmptyResponse { group: String, response: usize },
    #[error("response {response} of group {group} has a positive log-probability")]
    PositiveLogProb { group: String, response: usize },
    #[error("group {0} has no advantages assigned")]
    MissingAdvantage(String),
    #[error("group {0} has zero reward variance; filter it before the DAPO objective")]
    ZeroVarianceGroup(String),
    #[error("invalid clip configuration: {0}")]
    BadClip(String),
    #[error("invalid reward spec: {0}")]
    BadSpec(String),
    #[error("distribution {index} sums to {sum}")]
    NotNormalized { index: usize, sum: f64 },
    #[error("bucket count must be positive")]
    ZeroBuckets,
    #[error("unknown objective {0:?}; expected grpo, dapo or gspo")]
    UnknownObjective(String),
    #[error(transparent)]
    Verify(#[from] VerifyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub tokens: Vec<u32>,
    pub logp_new: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub reward: f64,
    pub advantage: Option<f64>,
    pub correct: bool,
}

impl Response {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// One query's G responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub query_id: String,
    pub gold_answer: String,
    pub responses: Vec<Response>,
}

const LOGP_SLACK: f64 = 1e-12;

impl RolloutGroup {
    pub fn size(&self) -> usize {
        self.responses.len()
    }

    pub fn correct_count(&self) -> usize {
        self.responses.iter().filter(|r| r.correct).count()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.responses.iter().map(|r| r.reward).collect()
    }

    /// Aligned, non-empty, non-positive log-probability arrays.
    pub fn validate(&self) -> Result<(), RlError> {
        for (i, r) in self.responses.iter().enumerate() {
            if r.tokens.is_empty() {
                return Err(RlError::EmptyResponse { group: self.query_id.clone(), response: i });
            }
            if r.logp_new.len() != r.tokens.len() || r.logp_old.len() != r.tokens.len() {
                return Err(RlError::LengthMismatch {
                    group: self.query_id.clone(),
                    response: i,
                    tokens: r.tokens.len(),
                    new: r.logp_new.len(),
                    old: r.logp_old.len(),
                });
            }
            if r.logp_new.iter().chain(&r.logp_old).any(|&l| l > LOGP_SLACK) {
                return Err(RlError::PositiveLogProb { group: self.query_id.clone(), response: i });
            }
        }
        Ok(())
    }

    fn advantages(&self) -> Result<Vec<f64>, RlError> {
        self.responses
            .iter()
            .map(|r| r.advantage.ok_or_else(|| RlError::MissingAdvantage(self.query_id.clone())))
            .collect()
    }
}

/// Clip bands and the optional KL weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    /// Symmetric band for GRPO and GSPO.
    pub eps: f64,
    pub eps_low: f64,
    pub eps_high: f64,
    /// Weight of the k3 KL estimate against the old policy (GRPO only).
    pub kl_beta: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig::grpo()
    }
}

impl ClipConfig {
    pub fn grpo() -> Self {
        ClipConfig { eps: 0.2, eps_low: 0.2, eps_high: 0.28, kl_beta: 0.0 }
    }

    pub fn dapo() -> Self {
        ClipConfig::grpo()
    }

    pub fn gspo() -> Self {
        ClipConfig { eps: 3e-4, ..ClipConfig::grpo() }
    }

    pub fn for_kind(kind: ObjectiveKind) -> Self {
        match kind {
            ObjectiveKind::Grpo => ClipConfig::grpo(),
            ObjectiveKind::Dapo => ClipConfig::dapo(),
            ObjectiveKind::Gspo => ClipConfig::gspo(),
        }
    }

    /// Same ε everywhere.
    pub fn symmetric(eps: f64) -> Self {
        ClipConfig { eps, eps_low: eps, eps_high: eps, kl_beta: 0.0 }
    }

    pub fn validate(&self) -> Result<(), RlError> {
        if !(self.eps > 0.0) {
            return Err(RlError::BadClip(format!("eps {} must be positive", self.eps)));
        }
        if !(self.eps_low > 0.0 && self.eps_low <= self.eps_high) {
            return Err(RlError::BadClip(format!(
                "need 0 < eps_low ({}) <= eps_high ({})",
                self.eps_low, self.eps_high
            )));
        }
        if !(self.kl_beta >= 0.0) {
            return Err(RlError::BadClip(format!("kl_beta {} must be nonnegative", self.kl_beta)));
        }
        Ok(())
    }
}

/// Keeps groups with at least one correct and one incorrect response.
pub fn dynamic_sample_filter(groups: Vec<RolloutGroup>) -> (Vec<RolloutGroup>, usize) {
    let before = groups.len();
    let kept: Vec<_> = groups
        .into_iter()
        .filter(|g| {
            let c = g.correct_count();
            c > 0 && c < g.size()
        })
        .collect();
    let removed = before - kept.len();
    (kept, removed)
}

/// Shannon entropy (nats) of one distribution; zero-probability entries
/// contribute nothing.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Mean entropy over steps. Each distribution must be nonnegative and sum
/// to 1 within 1e-6; an empty list has mean 0.
pub fn policy_entropy(dists: &[Vec<f64>]) -> Result<f64, RlError> {
    if dists.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (index, p) in dists.iter().enumerate() {
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || p.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(RlError::NotNormalized { index, sum });
        }
        total += entropy(p);
    }
    Ok(total / dists.len() as f64)
}
