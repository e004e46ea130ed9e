use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ToyError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Add,
    Sub,
    Mul,
    Choice,
}

/// One arithmetic question with a rule-checkable gold answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub id: String,
    pub prompt: String,
    pub gold: String,
    /// 0 for single-digit operands, 1 for two-digit operands.
    pub difficulty: u8,
    pub kind: TaskKind,
}

/// Relative weights of easy and hard tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifficultyMix {
    pub easy: f64,
    pub hard: f64,
}

impl DifficultyMix {
    pub fn easy_only() -> Self {
        DifficultyMix { easy: 1.0, hard: 0.0 }
    }

    pub fn even() -> Self {
        DifficultyMix { easy: 1.0, hard: 1.0 }
    }
}

pub const DEFAULT_CHOICE_FRACTION: f64 = 0.2;

pub fn generate_tasks(n: usize, seed: u64, mix: DifficultyMix) -> Result<Vec<SyntheticTask>, ToyError> {
    generate_tasks_with(n, seed, mix, DEFAULT_CHOICE_FRACTION)
}

/// `n` deterministic tasks. The easy/hard split is exact up to rounding;
/// about `choice_fraction` of them are four-option multiple choice.
pub fn generate_tasks_with(
    n: usize,
    seed: u64,
    mix: DifficultyMix,
    choice_fraction: f64,
) -> Result<Vec<SyntheticTask>, ToyError> {
    if n == 0 {
        return Err(ToyError::BadConfig("task count must be positive".into()));
    }
    if !(mix.easy >= 0.0 && mix.hard >= 0.0 && mix.easy + mix.hard > 0.0) {
        return Err(ToyError::BadConfig("difficulty mix needs nonnegative weights with a positive sum".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_easy = ((n as f64) * mix.easy / (mix.easy + mix.hard)).round() as usize;
    let mut levels: Vec<u8> = (0..n).map(|i| u8::from(i >= n_easy)).collect();
    levels.shuffle(&mut rng);
    Ok(levels
        .into_iter()
        .enumerate()
        .map(|(i, difficulty)| make_task(i, difficulty, choice_fraction, &mut rng))
        .collect())
}

fn make_task(i: usize, difficulty: u8, choice_fraction: f64, rng: &mut ChaCha8Rng) -> SyntheticTask {
    let range = if difficulty == 0 { 0..=9i64 } else { 10..=99i64 };
    let a = rng.gen_range(range.clone());
    let b = rng.gen_range(range);
    let (sym, value, kind) = match rng.gen_range(0..3) {
        0 => ('+', a + b, TaskKind::Add),
        1 => ('-', a - b, TaskKind::Sub),
        _ => ('*', a * b, TaskKind::Mul),
    };
    let id = format!("task{i:04}");
    if rng.gen::<f64>() < choice_fraction {
        let mut options = vec![value];
        while options.len() < 4 {
            let d = value + rng.gen_range(-9..=9);
            if !options.contains(&d) {
                options.push(d);
            }
        }
        options.shuffle(rng);
        let correct = options.iter().position(|&o| o == value).expect("value present");
        let listed: Vec<String> =
            options.iter().enumerate().map(|(k, o)| format!("{}) {o}", (b'A' + k as u8) as char)).collect();
        return SyntheticTask {
            id,
            prompt: format!("Which is {a}{sym}{b}? {}", listed.join(" ")),
            gold: ((b'A' + correct as u8) as char).to_string(),
            difficulty,
            kind: TaskKind::Choice,
        };
    }
    SyntheticTask { id, prompt: format!("{a}{sym}{b}=?"), gold: value.to_string(), difficulty, kind }
}

#[cfg(test)]
mod tests {
    use super::*;
    use omr_core::verify::{RuleOutcome, Verifier};

    #[test]
    fn deterministic() {
        let a = generate_tasks(1, 5, DifficultyMix::even()).unwrap();
        assert_eq!(a, generate_tasks(1, 5, DifficultyMix::even()).unwrap());
        assert!(generate_tasks(0, 5, DifficultyMix::even()).is_err());
    }

    #[test]
    fn golds_are_rule_reflexive() {
        let v = Verifier::rule_only();
        for t in generate_tasks(1000, 3, DifficultyMix::even()).unwrap() {
            assert_eq!(v.rule_stage(&t.gold, &t.gold).unwrap(), RuleOutcome::Yes, "{t:?}");
        }
    }

    #[test]
    fn mix_split() {
        let ts = generate_tasks(100, 9, DifficultyMix::even()).unwrap();
        let easy = ts.iter().filter(|t| t.difficulty == 0).count();
        assert!((49..=51).contains(&easy));
        let ts = generate_tasks(50, 9, DifficultyMix::easy_only()).unwrap();
        assert!(ts.iter().all(|t| t.difficulty == 0));
    }

    #[test]
    fn choice_tasks_are_well_formed() {
        let ts = generate_tasks_with(200, 1, DifficultyMix::easy_only(), 1.0).unwrap();
        for t in &ts {
            assert_eq!(t.kind, TaskKind::Choice);
            assert!(t.prompt.contains("A) ") && t.prompt.contains("D) "));
            assert!(["A", "B", "C", "D"].contains(&t.gold.as_str()));
        }
    }
}
