use serde::{Deserialize, Serialize};

use super::{RlError, RolloutGroup};

pub const DEFAULT_STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageSet {
    pub advantages: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of the rewards.
    pub std: f64,
}

/// `Â_i = (r_i − mean) / (std + std_floor)`. A group whose rewards are all
/// identical gets all-zero advantages.
pub fn group_advantages(rewards: &[f64], std_floor: f64) -> AdvantageSet {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let constant = rewards.windows(2).all(|w| w[0] == w[1]);
    let advantages = if constant || std == 0.0 {
        vec![0.0; rewards.len()]
    } else {
        rewards.iter().map(|r| (r - mean) / (std + std_floor)).collect()
    };
    AdvantageSet { advantages, mean, std }
}

/// Computes advantages from the group's rewards and stores them.
pub fn assign_advantages(group: &mut RolloutGroup, std_floor: f64) -> Result<AdvantageSet, RlError> {
    if group.size() < 2 {
        return Err(RlError::GroupTooSmall(group.query_id.clone()));
    }
    let set = group_advantages(&group.rewards(), std_floor);
    for (r, &a) in group.responses.iter_mut().zip(&set.advantages) {
        r.advantage = Some(a);
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn alternating_rewards() {
        let a = group_advantages(&[1.0, 0.0, 1.0, 0.0], 0.0);
        assert_eq!(a.advantages, vec![1.0, -1.0, 1.0, -1.0]);
        assert_eq!((a.mean, a.std), (0.5, 0.5));
        let b = group_advantages(&[1.0, 0.0, 1.0, 0.0], DEFAULT_STD_FLOOR);
        assert!((b.advantages[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn constant_rewards() {
        assert_eq!(group_advantages(&[1.0; 4], DEFAULT_STD_FLOOR).advantages, vec![0.0; 4]);
        assert_eq!(group_advantages(&[0.1 + 0.2; 3], 0.0).advantages, vec![0.0; 3]);
    }

    #[test]
    fn small_groups_rejected() {
        let mut g = RolloutGroup { query_id: "q".into(), gold_answer: String::new(), responses: vec![] };
        assert!(matches!(assign_advantages(&mut g, 0.0), Err(RlError::GroupTooSmall(_))));
    }

    proptest! {
        #[test]
        fn mean_zero(rs in proptest::collection::vec(-5.0f64..5.0, 2..32)) {
            let a = group_advantages(&rs, DEFAULT_STD_FLOOR);
            prop_assert!(a.advantages.iter().sum::<f64>().abs() < 1e-9);
        }

        #[test]
        fn affine_invariance(rs in proptest::collection::vec(0.0f64..1.0, 2..32), scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
            let base = group_advantages(&rs, 0.0);
            let moved: Vec<f64> = rs.iter().map(|r| scale * r + shift).collect();
            let t = group_advantages(&moved, 0.0);
            let spread = rs.iter().cloned().fold(f64::MIN, f64::max) - rs.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-6);
            for (x, y) in base.advantages.iter().zip(&t.advantages) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
