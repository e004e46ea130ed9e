use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ClipConfig, Response, RlError, RolloutGroup};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Grpo,
    Dapo,
    Gspo,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 3] = [ObjectiveKind::Grpo, ObjectiveKind::Dapo, ObjectiveKind::Gspo];

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveKind::Grpo => "grpo",
            ObjectiveKind::Dapo => "dapo",
            ObjectiveKind::Gspo => "gspo",
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectiveKind {
    type Err = RlError;

    fn from_str(s: &str) -> Result<Self, RlError> {
        match s.to_ascii_lowercase().as_str() {
            "grpo" => Ok(ObjectiveKind::Grpo),
            "dapo" => Ok(ObjectiveKind::Dapo),
            "gspo" => Ok(ObjectiveKind::Gspo),
            _ => Err(RlError::UnknownObjective(s.to_string())),
        }
    }
}

/// Objective value (to maximize) and its gradient with respect to every
/// `logp_new` entry, indexed `[group][response][token]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveOutput {
    pub value: f64,
    pub grad: Vec<Vec<Vec<f64>>>,
}

impl ObjectiveOutput {
    fn zeros(groups: &[RolloutGroup]) -> Self {
        ObjectiveOutput {
            value: 0.0,
            grad: groups
                .iter()
                .map(|g| g.responses.iter().map(|r| vec![0.0; r.len()]).collect())
                .collect(),
        }
    }
}

pub fn token_importance_ratios(resp: &Response) -> Result<Vec<f64>, RlError> {
    if resp.logp_new.len() != resp.logp_old.len() {
        return Err(RlError::LengthMismatch {
            group: String::new(),
            response: 0,
            tokens: resp.tokens.len(),
            new: resp.logp_new.len(),
            old: resp.logp_old.len(),
        });
    }
    Ok(resp.logp_new.iter().zip(&resp.logp_old).map(|(n, o)| (n - o).exp()).collect())
}

/// Length-normalized sequence ratio `exp(mean_t(logp_new − logp_old))`.
pub fn sequence_importance_ratio(resp: &Response) -> Result<f64, RlError> {
    if resp.logp_new.is_empty() {
        return Err(RlError::EmptyResponse { group: String::new(), response: 0 });
    }
    if resp.logp_new.len() != resp.logp_old.len() {
        return Err(RlError::LengthMismatch {
            group: String::new(),
            response: 0,
            tokens: resp.tokens.len(),
            new: resp.logp_new.len(),
            old: resp.logp_old.len(),
        });
    }
    let mean = resp.logp_new.iter().zip(&resp.logp_old).map(|(n, o)| n - o).sum::<f64>() / resp.logp_new.len() as f64;
    Ok(mean.exp())
}

/// `min(r·A, clip(r, lo, hi)·A)` and its derivative in `r`. At a tie the
/// unclipped branch is taken; a selected clipped branch has zero slope.
pub fn clipped_term(ratio: f64, adv: f64, lo: f64, hi: f64) -> (f64, f64) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(lo, hi) * adv;
    if unclipped <= clipped {
        (unclipped, adv)
    } else {
        (clipped, 0.0)
    }
}

fn checked(groups: &[RolloutGroup], clip: &ClipConfig) -> Result<Vec<Vec<f64>>, RlError> {
    clip.validate()?;
    groups
        .iter()
        .map(|g| {
            g.validate()?;
            g.advantages()
        })
        .collect()
}

/// Token-level clipped objective, averaged per response, per group and over
/// groups, with an optional k3 KL penalty against the old policy.
pub fn grpo_objective(groups: &[RolloutGroup], clip: &ClipConfig) -> Result<ObjectiveOutput, RlError> {
    let advs = checked(groups, clip)?;
    let mut out = ObjectiveOutput::zeros(groups);
    if groups.is_empty() {
        return Ok(out);
    }
    let (lo, hi) = (1.0 - clip.eps, 1.0 + clip.eps);
    let n_groups = groups.len() as f64;
    for (gi, g) in groups.iter().enumerate() {
        let w_group = 1.0 / (n_groups * g.size() as f64);
        for (i, r) in g.responses.iter().enumerate() {
            let w = w_group / r.len() as f64;
            let a = advs[gi][i];
            for t in 0..r.len() {
                let d = r.logp_new[t] - r.logp_old[t];
                let ratio = d.exp();
                let (v, dv) = clipped_term(ratio, a, lo, hi);
                let mut val = v;
                let mut dlogp = dv * ratio;
                if clip.kl_beta > 0.0 {
                    let back = (-d).exp();
                    val -= clip.kl_beta * (back + d - 1.0);
                    dlogp -= clip.kl_beta * (1.0 - back);
                }
                out.value += w * val;
                out.grad[gi][i][t] = w * dlogp;
            }
        }
    }
    Ok(out)
}

/// Token-level clipped objective with the decoupled band, normalized by the
/// total number of tokens across every group in the batch.
pub fn dapo_objective(groups: &[RolloutGroup], clip: &ClipConfig) -> Result<ObjectiveOutput, RlError> {
    let advs = checked(groups, clip)?;
    for g in groups {
        if g.responses.windows(2).all(|w| w[0].reward == w[1].reward) {
            return Err(RlError::ZeroVarianceGroup(g.query_id.clone()));
        }
    }
    let mut out = ObjectiveOutput::zeros(groups);
    let total: usize = groups.iter().flat_map(|g| g.responses.iter().map(|r| r.len())).sum();
    if total == 0 {
        return Ok(out);
    }
    let w = 1.0 / total as f64;
    let (lo, hi) = (1.0 - clip.eps_low, 1.0 + clip.eps_high);
    for (gi, g) in groups.iter().enumerate() {
        for (i, r) in g.responses.iter().enumerate() {
            let a = advs[gi][i];
            for t in 0..r.len() {
                let ratio = (r.logp_new[t] - r.logp_old[t]).exp();
                let (v, dv) = clipped_term(ratio, a, lo, hi);
                out.value += w * v;
                out.grad[gi][i][t] = w * dv * ratio;
            }
        }
    }
    Ok(out)
}

/// Sequence-level clipped objective on the geometric-mean ratio `s_i`,
/// averaged per group and over groups.
pub fn gspo_objective(groups: &[RolloutGroup], clip: &ClipConfig) -> Result<ObjectiveOutput, RlError> {
    let advs = checked(groups, clip)?;
    let mut out = ObjectiveOutput::zeros(groups);
    if groups.is_empty() {
        return Ok(out);
    }
    let (lo, hi) = (1.0 - clip.eps, 1.0 + clip.eps);
    let n_groups = groups.len() as f64;
    for (gi, g) in groups.iter().enumerate() {
        let w = 1.0 / (n_groups * g.size() as f64);
        for (i, r) in g.responses.iter().enumerate() {
            let s = sequence_importance_ratio(r)?;
            let (v, dv) = clipped_term(s, advs[gi][i], lo, hi);
            out.value += w * v;
            let per_token = w * dv * s / r.len() as f64;
            out.grad[gi][i].iter_mut().for_each(|x| *x = per_token);
        }
    }
    Ok(out)
}

pub fn objective(kind: ObjectiveKind, groups: &[RolloutGroup], clip: &ClipConfig) -> Result<ObjectiveOutput, RlError> {
    match kind {
        ObjectiveKind::Grpo => grpo_objective(groups, clip),
        ObjectiveKind::Dapo => dapo_objective(groups, clip),
        ObjectiveKind::Gspo => gspo_objective(groups, clip),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rlcore::assign_advantages;
    use crate::rlcore::tests::response;
    use proptest::prelude::*;

    fn grp(responses: Vec<Response>) -> RolloutGroup {
        RolloutGroup { query_id: "q".into(), gold_answer: "1".into(), responses }
    }

    fn with_rewards(mut g: RolloutGroup, rewards: &[f64]) -> RolloutGroup {
        for (r, &w) in g.responses.iter_mut().zip(rewards) {
            r.reward = w;
        }
        assign_advantages(&mut g, 0.0).unwrap();
        g
    }

    #[test]
    fn ratio_examples() {
        let r = response(vec![-1.0, -2.0], vec![-1.0, -2.0], 0.0);
        assert_eq!(token_importance_ratios(&r).unwrap(), vec![1.0, 1.0]);
        let r = response(vec![2f64.ln() - 3.0], vec![-3.0], 0.0);
        assert!((token_importance_ratios(&r).unwrap()[0] - 2.0).abs() < 1e-12);
        let r = response(vec![4f64.ln() - 5.0, -1.0], vec![-5.0, -1.0], 0.0);
        assert!((sequence_importance_ratio(&r).unwrap() - 2.0).abs() < 1e-12);
        let r = response(vec![2f64.ln() - 5.0, 2f64.ln() - 1.0], vec![-5.0, -1.0], 0.0);
        assert!((sequence_importance_ratio(&r).unwrap() - 2.0).abs() < 1e-12);
        assert!(sequence_importance_ratio(&response(vec![], vec![], 0.0)).is_err());
        let mut bad = response(vec![-1.0], vec![-1.0], 0.0);
        bad.logp_old.push(-1.0);
        assert!(token_importance_ratios(&bad).is_err());
    }

    #[test]
    fn clipped_term_branches() {
        assert_eq!(clipped_term(1.5, 1.0, 0.8, 1.2), (1.2, 0.0));
        assert_eq!(clipped_term(1.5, -1.0, 0.8, 1.2), (-1.5, -1.0));
        assert_eq!(clipped_term(0.5, 1.0, 0.8, 1.2), (0.5, 1.0));
        assert_eq!(clipped_term(0.5, -1.0, 0.8, 1.2), (-0.8, 0.0));
        assert_eq!(clipped_term(1.0, 2.0, 0.8, 1.2), (2.0, 2.0));
    }

    /// Two responses of two tokens, evaluated by hand:
    /// rewards (1, 0) give advantages (+1, −1);
    /// response 0 ratios (1.1, 1.5) → terms (1.1, 1.2); mean 1.15;
    /// response 1 ratios (0.5, 1.0) → terms (−0.8, −1.0); mean −0.9;
    /// J = (1.15 − 0.9) / 2 = 0.125.
    #[test]
    fn grpo_hand_example() {
        let g = with_rewards(
            grp(vec![
                response(vec![1.1f64.ln() - 1.0, 1.5f64.ln() - 1.0], vec![-1.0, -1.0], 0.0),
                response(vec![0.5f64.ln() - 1.0, -1.0], vec![-1.0, -1.0], 0.0),
            ]),
            &[1.0, 0.0],
        );
        let out = grpo_objective(&[g], &ClipConfig::symmetric(0.2)).unwrap();
        assert!((out.value - 0.125).abs() < 1e-12, "{}", out.value);
        // d/dlogp = w·A·r where unclipped is selected, 0 otherwise; w = 1/(2·2)
        let expect = [[0.25 * 1.1, 0.0], [0.0, -0.25]];
        for i in 0..2 {
            for t in 0..2 {
                assert!((out.grad[0][i][t] - expect[i][t]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_policy_values() {
        let g = with_rewards(
            grp(vec![
                response(vec![-1.0, -0.5], vec![-1.0, -0.5], 0.0),
                response(vec![-0.3; 6], vec![-0.3; 6], 0.0),
                response(vec![-2.0], vec![-2.0], 0.0),
            ]),
            &[1.0, 0.0, 0.4],
        );
        let groups = [g];
        assert!(grpo_objective(&groups, &ClipConfig::grpo()).unwrap().value.abs() < 1e-9);
        assert!(gspo_objective(&groups, &ClipConfig::gspo()).unwrap().value.abs() < 1e-9);
        let a: Vec<f64> = groups[0].responses.iter().map(|r| r.advantage.unwrap()).collect();
        let expect = (2.0 * a[0] + 6.0 * a[1] + a[2]) / 9.0;
        assert!((dapo_objective(&groups, &ClipConfig::dapo()).unwrap().value - expect).abs() < 1e-9);
    }

    #[test]
    fn dapo_long_response_weight() {
        // lengths {2, 6}: DAPO weight per token 1/8 vs GRPO 1/4 and 1/12
        let g = with_rewards(
            grp(vec![response(vec![-1.0; 2], vec![-1.0; 2], 0.0), response(vec![-1.0; 6], vec![-1.0; 6], 0.0)]),
            &[1.0, 0.0],
        );
        let clip = ClipConfig::symmetric(0.2);
        let d = dapo_objective(std::slice::from_ref(&g), &clip).unwrap();
        let r = grpo_objective(std::slice::from_ref(&g), &clip).unwrap();
        let rel_short = d.grad[0][0][0] / r.grad[0][0][0];
        let rel_long = d.grad[0][1][0] / r.grad[0][1][0];
        assert!((rel_long / rel_short - 3.0).abs() < 1e-12);
    }

    #[test]
    fn dapo_rejects_zero_variance() {
        let g = with_rewards(
            grp(vec![response(vec![-1.0], vec![-1.0], 0.0), response(vec![-1.0], vec![-1.0], 0.0)]),
            &[1.0, 1.0],
        );
        assert!(matches!(dapo_objective(&[g], &ClipConfig::dapo()), Err(RlError::ZeroVarianceGroup(_))));
    }

    #[test]
    fn missing_advantage_rejected() {
        let mut g = grp(vec![response(vec![-1.0], vec![-1.0], 0.0), response(vec![-1.0], vec![-1.0], 0.0)]);
        g.responses[0].advantage = None;
        assert!(matches!(grpo_objective(&[g], &ClipConfig::grpo()), Err(RlError::MissingAdvantage(_))));
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("GSPO".parse::<ObjectiveKind>().unwrap(), ObjectiveKind::Gspo);
        assert!("ppo".parse::<ObjectiveKind>().is_err());
    }

    #[test]
    fn clip_saturation_bounded() {
        let mk = |x: f64| {
            with_rewards(
                grp(vec![response(vec![x, -1.0], vec![-1.0, -1.0], 0.0), response(vec![-1.0], vec![-1.0], 0.0)]),
                &[1.0, 0.0],
            )
        };
        let clip = ClipConfig::grpo();
        let a = grpo_objective(&[mk(-0.5)], &clip).unwrap();
        let b = grpo_objective(&[mk(-1e-9)], &clip).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.grad[0][0][0], 0.0);
    }

    fn arb_group(max_len: usize, equal_len: Option<usize>) -> impl Strategy<Value = RolloutGroup> {
        let len = match equal_len {
            Some(l) => Just(l).boxed(),
            None => (1..=max_len).boxed(),
        };
        proptest::collection::vec(
            (len, any::<u64>(), 0.0f64..1.0),
            2..8,
        )
        .prop_map(move |specs| {
            let responses = specs
                .into_iter()
                .map(|(n, seed, reward)| {
                    let mut s = seed;
                    let mut next = || {
                        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                        (s >> 11) as f64 / (1u64 << 53) as f64
                    };
                    let old: Vec<f64> = (0..n).map(|_| -3.0 * next() - 0.01).collect();
                    let new: Vec<f64> = old.iter().map(|o| (o + 0.08 * (next() - 0.5)).min(0.0)).collect();
                    Response { reward, ..response(new, old, 0.0) }
                })
                .collect();
            let mut g = grp(responses);
            assign_advantages(&mut g, 1e-6).unwrap();
            g
        })
    }

    proptest! {
        #[test]
        fn inside_band_clipping_is_inactive(g in arb_group(6, None)) {
            let wide = ClipConfig { eps: 10.0, eps_low: 0.9, eps_high: 10.0, kl_beta: 0.0 };
            let out = grpo_objective(std::slice::from_ref(&g), &wide).unwrap();
            let mut unclipped = 0.0;
            for r in &g.responses {
                let mean: f64 = token_importance_ratios(r).unwrap().iter().map(|x| x * r.advantage.unwrap()).sum::<f64>() / r.len() as f64;
                unclipped += mean / g.size() as f64;
            }
            prop_assert!((out.value - unclipped).abs() < 1e-12);
        }

        #[test]
        fn dapo_equals_grpo_on_equal_lengths(g in arb_group(0, Some(4)), eps in 0.01f64..0.5) {
            prop_assume!(g.responses.windows(2).any(|w| w[0].reward != w[1].reward));
            let clip = ClipConfig::symmetric(eps);
            let d = dapo_objective(std::slice::from_ref(&g), &clip).unwrap().value;
            let r = grpo_objective(std::slice::from_ref(&g), &clip).unwrap().value;
            prop_assert!((d - r).abs() < 1e-9);
        }

        #[test]
        fn gspo_equals_grpo_on_single_tokens(g in arb_group(0, Some(1)), eps in 0.01f64..0.5) {
            let clip = ClipConfig::symmetric(eps);
            let s = gspo_objective(std::slice::from_ref(&g), &clip).unwrap();
            let r = grpo_objective(std::slice::from_ref(&g), &clip).unwrap();
            prop_assert!((s.value - r.value).abs() < 1e-9);
            prop_assert_eq!(s.grad.len(), r.grad.len());
        }
    }
}
