use omr_rl::rlcore::ObjectiveKind;
use omr_rl::toylab::{generate_tasks, reward_summary, train_loop, DifficultyMix, SoftmaxSequencePolicy, TrainConfig};

fn run(objective: ObjectiveKind, group_size: usize, steps: usize) -> Vec<omr_rl::toylab::RolloutRecord> {
    let tasks = generate_tasks(200, 0, DifficultyMix::easy_only()).unwrap();
    let cfg = TrainConfig { objective, group_size, steps, lr: 200.0, seed: 0, ..Default::default() };
    train_loop(&mut SoftmaxSequencePolicy::default(), &tasks, &cfg).unwrap()
}

#[test]
fn gspo_frozen_run_learns() {
    let s = reward_summary(&run(ObjectiveKind::Gspo, 16, 2000), 5, 50).unwrap();
    assert!(s.initial < 0.35 && s.last > 0.80, "{s:?}");
}

#[test]
fn grpo_frozen_run_learns() {
    let s = reward_summary(&run(ObjectiveKind::Grpo, 16, 2000), 5, 50).unwrap();
    assert!(s.last > 0.70, "{s:?}");
}

#[test]
fn dapo_frozen_run_learns() {
    let s = reward_summary(&run(ObjectiveKind::Dapo, 16, 2000), 5, 50).unwrap();
    assert!(s.last > 0.70, "{s:?}");
}

#[test]
fn dapo_small_groups_filter_more() {
    let frac = |g| {
        let recs = run(ObjectiveKind::Dapo, g, 100);
        let filtered: usize = recs.iter().map(|r| r.groups_filtered).sum();
        let seen: usize = recs.iter().map(|r| r.groups_filtered + r.groups_kept).sum();
        filtered as f64 / seen as f64
    };
    let (two, eight) = (frac(2), frac(8));
    assert!(two > eight, "G=2 {two} vs G=8 {eight}");
}
