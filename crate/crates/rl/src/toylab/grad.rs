use omr_core::verify::Verifier;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::policy::{prompt_key, render, Context, ParamMap, SoftmaxSequencePolicy, V};
use super::tasks::SyntheticTask;
use super::ToyError;
use crate::rlcore::{
    assign_advantages, composite_reward, objective, overlength_penalty, sequence_importance_ratio, ClipConfig,
    ObjectiveKind, Response, RewardSpec, RolloutGroup, DEFAULT_STD_FLOOR,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub group_size: usize,
    pub temperature: f64,
    pub max_tokens: usize,
    pub reward: RewardSpec,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            group_size: 16,
            temperature: 1.0,
            max_tokens: 64,
            reward: RewardSpec { lambda_fmt: 0.1, l_max: 64, l_cache: 16 },
        }
    }
}

/// A rollout group plus what the toy needs to re-score it: the prompt key
/// and the rendered texts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyGroup {
    pub task_id: String,
    pub prompt: u64,
    pub texts: Vec<String>,
    /// Mean per-step sampler entropy of each response.
    pub entropies: Vec<f64>,
    pub group: RolloutGroup,
}

/// Samples `group_size` responses for `task`. `logp_old` is what the sampler
/// saw; `logp_new` is recomputed under the policy at its own temperature.
pub fn rollout<R: Rng>(
    policy: &SoftmaxSequencePolicy,
    task: &SyntheticTask,
    cfg: &RolloutConfig,
    verifier: &Verifier,
    rng: &mut R,
) -> Result<ToyGroup, ToyError> {
    if cfg.group_size < 2 {
        return Err(ToyError::BadConfig("group size must be at least 2".into()));
    }
    if !(cfg.temperature > 0.0) || cfg.max_tokens == 0 {
        return Err(ToyError::BadConfig("temperature and max_tokens must be positive".into()));
    }
    let prompt = prompt_key(&task.prompt);
    let mut out = ToyGroup {
        task_id: task.id.clone(),
        prompt,
        texts: Vec::with_capacity(cfg.group_size),
        entropies: Vec::with_capacity(cfg.group_size),
        group: RolloutGroup { query_id: task.id.clone(), gold_answer: task.gold.clone(), responses: Vec::new() },
    };
    for _ in 0..cfg.group_size {
        let s = policy.sample(prompt, cfg.temperature, cfg.max_tokens, rng);
        let text = render(&s.tokens);
        let parts = composite_reward(&text, &task.prompt, &task.gold, &cfg.reward, verifier)?;
        let reward = parts.r + overlength_penalty(s.tokens.len(), &cfg.reward);
        out.entropies.push(s.entropy.iter().sum::<f64>() / s.entropy.len() as f64);
        out.group.responses.push(Response {
            logp_new: policy.logp_sequence(prompt, &s.tokens),
            logp_old: s.logp,
            tokens: s.tokens,
            reward,
            advantage: None,
            correct: parts.acc == 1.0,
        });
        out.texts.push(text);
    }
    Ok(out)
}

/// Recomputes every `logp_new` under `policy`.
pub fn relabel(policy: &SoftmaxSequencePolicy, groups: &mut [ToyGroup]) {
    for g in groups {
        for r in &mut g.group.responses {
            r.logp_new = policy.logp_sequence(g.prompt, &r.tokens);
        }
    }
}

fn rollout_groups(groups: &[ToyGroup]) -> Vec<RolloutGroup> {
    groups.iter().map(|g| g.group.clone()).collect()
}

/// Objective value with `logp_new` taken from `policy`.
pub fn objective_at(
    policy: &SoftmaxSequencePolicy,
    groups: &[ToyGroup],
    kind: ObjectiveKind,
    clip: &ClipConfig,
) -> Result<f64, ToyError> {
    let mut gs = groups.to_vec();
    relabel(policy, &mut gs);
    Ok(objective(kind, &rollout_groups(&gs), clip)?.value)
}

/// Exact gradient of the objective with respect to every logit offset,
/// chained through `∂ log p_a / ∂ l_v = (1[v = a] − p_v) / T`. Returns the
/// objective value too.
pub fn analytic_gradient(
    policy: &SoftmaxSequencePolicy,
    groups: &[ToyGroup],
    kind: ObjectiveKind,
    clip: &ClipConfig,
) -> Result<(f64, ParamMap), ToyError> {
    let mut gs = groups.to_vec();
    relabel(policy, &mut gs);
    let out = objective(kind, &rollout_groups(&gs), clip)?;
    let t = policy.temperature;
    let mut grad = ParamMap::new();
    for (gi, g) in gs.iter().enumerate() {
        for (i, r) in g.group.responses.iter().enumerate() {
            for (step, ctx) in policy.contexts(g.prompt, &r.tokens).into_iter().enumerate() {
                let d = out.grad[gi][i][step];
                if d == 0.0 {
                    continue;
                }
                let p = policy.probs(&ctx);
                let row = grad.entry(ctx).or_insert([0.0; V]);
                for v in 0..V {
                    row[v] -= d * p[v] / t;
                }
                row[r.tokens[step] as usize] += d / t;
            }
        }
    }
    Ok((out.value, grad))
}

fn visited(policy: &SoftmaxSequencePolicy, groups: &[ToyGroup]) -> Vec<Context> {
    let mut ctxs: Vec<Context> = groups
        .iter()
        .flat_map(|g| g.group.responses.iter().flat_map(move |r| policy.contexts(g.prompt, &r.tokens)))
        .collect();
    ctxs.sort();
    ctxs.dedup();
    ctxs
}

/// Central differences `(J(θ + h e_k) − J(θ − h e_k)) / 2h` over every
/// (visited context, symbol) parameter. Brute force.
pub fn finite_difference_oracle(
    policy: &SoftmaxSequencePolicy,
    groups: &[ToyGroup],
    kind: ObjectiveKind,
    clip: &ClipConfig,
    h: f64,
) -> Result<ParamMap, ToyError> {
    if !(h > 0.0) {
        return Err(ToyError::BadConfig("finite-difference step must be positive".into()));
    }
    let mut est = ParamMap::new();
    let mut p = policy.clone();
    for ctx in visited(policy, groups) {
        let mut row = [0.0; V];
        for (v, slot) in row.iter_mut().enumerate() {
            let base = policy.get(&ctx, v);
            p.set(ctx, v, base + h);
            let up = objective_at(&p, groups, kind, clip)?;
            p.set(ctx, v, base - h);
            let down = objective_at(&p, groups, kind, clip)?;
            p.set(ctx, v, base);
            *slot = (up - down) / (2.0 * h);
        }
        est.insert(ctx, row);
    }
    Ok(est)
}

/// True when some importance ratio sits within `tol` of a clip edge, where
/// the objective has a kink.
pub fn near_clip_boundary(
    policy: &SoftmaxSequencePolicy,
    groups: &[ToyGroup],
    kind: ObjectiveKind,
    clip: &ClipConfig,
    tol: f64,
) -> bool {
    let mut gs = groups.to_vec();
    relabel(policy, &mut gs);
    let edges = match kind {
        ObjectiveKind::Grpo | ObjectiveKind::Gspo => [1.0 - clip.eps, 1.0 + clip.eps],
        ObjectiveKind::Dapo => [1.0 - clip.eps_low, 1.0 + clip.eps_high],
    };
    let near = |r: f64| edges.iter().any(|e| (r - e).abs() < tol);
    gs.iter().flat_map(|g| &g.group.responses).any(|r| match kind {
        ObjectiveKind::Gspo => sequence_importance_ratio(r).map_or(false, near),
        _ => r.logp_new.iter().zip(&r.logp_old).any(|(n, o)| near((n - o).exp())),
    })
}

/// A random small problem for gradient checking.
#[derive(Debug, Clone)]
pub struct OracleInstance {
    pub policy: SoftmaxSequencePolicy,
    pub groups: Vec<ToyGroup>,
    pub kind: ObjectiveKind,
    pub clip: ClipConfig,
}

/// Responses of up to 8 tokens sampled from the prior, a random old policy
/// for `logp_old`, a perturbed current policy, random rewards with nonzero
/// spread, and a random clip band.
pub fn oracle_instance(kind: ObjectiveKind, seed: u64) -> Result<OracleInstance, ToyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = rng.gen_range(1..=2);
    let temperature = rng.gen_range(0.7..1.5);
    let prior = SoftmaxSequencePolicy::new(order, 1.0);
    let n_groups = rng.gen_range(1..=3);
    let mut groups = Vec::with_capacity(n_groups);
    for gi in 0..n_groups {
        let prompt: u64 = rng.gen();
        let size = rng.gen_range(2..=8);
        let mut responses = Vec::with_capacity(size);
        for _ in 0..size {
            let max_tokens = rng.gen_range(1..=8);
            let s = prior.sample(prompt, 1.0, max_tokens, &mut rng);
            let reward = [0.0, 0.1, 0.9, 1.0][rng.gen_range(0..4)];
            responses.push(Response {
                tokens: s.tokens,
                logp_new: Vec::new(),
                logp_old: Vec::new(),
                reward,
                advantage: None,
                correct: reward > 0.5,
            });
        }
        if responses.windows(2).all(|w| w[0].reward == w[1].reward) {
            responses[0].reward = 1.0 - responses[0].reward;
            responses[0].correct = !responses[0].correct;
        }
        groups.push(ToyGroup {
            task_id: format!("g{gi}"),
            prompt,
            texts: responses.iter().map(|r| render(&r.tokens)).collect(),
            entropies: vec![0.0; size],
            group: RolloutGroup { query_id: format!("g{gi}"), gold_answer: "1".into(), responses },
        });
    }

    let mut old = SoftmaxSequencePolicy::new(order, temperature);
    let ctxs = visited(&old, &groups);
    for ctx in &ctxs {
        for v in 0..V {
            old.set(*ctx, v, rng.gen_range(-1.0..1.0));
        }
    }
    for g in &mut groups {
        for r in &mut g.group.responses {
            r.logp_old = old.logp_sequence(g.prompt, &r.tokens);
        }
        assign_advantages(&mut g.group, DEFAULT_STD_FLOOR)?;
    }
    let mut policy = old.clone();
    for ctx in &ctxs {
        for v in 0..V {
            policy.set(*ctx, v, old.get(ctx, v) + rng.gen_range(-0.3..0.3));
        }
    }
    relabel(&policy, &mut groups);

    let clip = match kind {
        ObjectiveKind::Grpo => ClipConfig {
            eps: rng.gen_range(0.05..0.3),
            kl_beta: if rng.gen_bool(0.5) { rng.gen_range(0.0..0.2) } else { 0.0 },
            ..ClipConfig::grpo()
        },
        ObjectiveKind::Dapo => {
            let lo = rng.gen_range(0.05..0.3);
            ClipConfig { eps_low: lo, eps_high: lo + rng.gen_range(0.0..0.2), ..ClipConfig::dapo() }
        }
        ObjectiveKind::Gspo => ClipConfig { eps: rng.gen_range(0.05..0.5), ..ClipConfig::gspo() },
    };
    Ok(OracleInstance { policy, groups, kind, clip })
}

pub const ORACLE_H: f64 = 1e-5;
pub const ORACLE_RTOL: f64 = 1e-4;
/// Floor under the relative tolerance for gradients that are zero up to
/// floating-point noise.
pub const ORACLE_ATOL: f64 = 1e-9;
pub const BOUNDARY_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub kind: ObjectiveKind,
    pub checked: usize,
    pub skipped: usize,
    pub params_checked: usize,
    pub mismatches: usize,
    pub max_abs_err: f64,
    /// Over parameters whose gradient exceeds 1e-6 in magnitude.
    pub max_rel_err: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.mismatches == 0
    }
}

/// Checks `instances` random instances (skipping ones with a ratio near a
/// clip edge) of `kind` against the finite-difference oracle.
pub fn oracle_suite(kind: ObjectiveKind, instances: usize, seed: u64) -> Result<OracleReport, ToyError> {
    let mut rep = OracleReport {
        kind,
        checked: 0,
        skipped: 0,
        params_checked: 0,
        mismatches: 0,
        max_abs_err: 0.0,
        max_rel_err: 0.0,
    };
    let mut k = 0u64;
    while rep.checked < instances {
        if rep.skipped > 10 * instances.max(1) {
            return Err(ToyError::BadConfig("too many instances near a clip boundary".into()));
        }
        let inst = oracle_instance(kind, seed.wrapping_add(k))?;
        k += 1;
        if near_clip_boundary(&inst.policy, &inst.groups, kind, &inst.clip, BOUNDARY_TOL) {
            rep.skipped += 1;
            continue;
        }
        let (_, exact) = analytic_gradient(&inst.policy, &inst.groups, kind, &inst.clip)?;
        let fd = finite_difference_oracle(&inst.policy, &inst.groups, kind, &inst.clip, ORACLE_H)?;
        for (ctx, row) in &fd {
            let a = exact.get(ctx).copied().unwrap_or([0.0; V]);
            for v in 0..V {
                let err = (a[v] - row[v]).abs();
                let scale = a[v].abs().max(row[v].abs());
                rep.params_checked += 1;
                rep.max_abs_err = rep.max_abs_err.max(err);
                if scale > 1e-6 {
                    rep.max_rel_err = rep.max_rel_err.max(err / scale);
                }
                if err > ORACLE_RTOL * scale + ORACLE_ATOL {
                    rep.mismatches += 1;
                }
            }
        }
        rep.checked += 1;
    }
    Ok(rep)
}
