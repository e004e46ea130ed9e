use std::collections::BTreeMap;
use std::sync::OnceLock;

use omr_core::hashing::fnv1a64;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const VOCAB: [&str; 29] = [
    "<eos>", "<think>", "</think>", "<answer>", "</answer>", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "-",
    "A", "B", "C", "D", "let", "wait", "think", "check", "verify", "hmm", "+", "*", "=",
];
pub const V: usize = VOCAB.len();

pub const EOS: u8 = 0;
pub const THINK: u8 = 1;
pub const THINK_END: u8 = 2;
pub const ANSWER: u8 = 3;
pub const ANSWER_END: u8 = 4;
const DIGITS: std::ops::Range<u8> = 5..15;
const MINUS: u8 = 15;
const LETTERS: std::ops::Range<u8> = 16..20;
const WORDS: std::ops::Range<u8> = 20..26;

/// Marks "no token yet" in a context.
pub const PAD: u8 = u8::MAX;

/// Below this temperature sampling is greedy.
pub const GREEDY_T: f64 = 1e-6;

/// Prompt hash plus the last two tokens (`prev[1]` is the most recent).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Context {
    pub prompt: u64,
    pub prev: [u8; 2],
}

pub type Logits = [f64; V];

/// Parameter-shaped map, used for both parameters and gradients.
pub type ParamMap = BTreeMap<Context, Logits>;

pub fn prompt_key(prompt: &str) -> u64 {
    fnv1a64(prompt.as_bytes())
}

/// Fixed cold-start logits by previous token. They give the sampler the
/// `<think> … </think><answer> … </answer><eos>` shape without any
/// knowledge of answers.
fn prior_row(prev: u8) -> Logits {
    let mut row = [-6.0; V];
    let set = |row: &mut Logits, ids: std::ops::Range<u8>, v: f64| ids.for_each(|i| row[i as usize] = v);
    match prev {
        PAD => row[THINK as usize] = 4.0,
        THINK => {
            set(&mut row, WORDS, 0.0);
            row[THINK_END as usize] = 0.5;
        }
        p if WORDS.contains(&p) => {
            set(&mut row, WORDS, -0.5);
            row[THINK_END as usize] = 1.0;
        }
        THINK_END => row[ANSWER as usize] = 4.0,
        ANSWER => {
            set(&mut row, DIGITS, 1.0);
            set(&mut row, LETTERS, 0.0);
            row[MINUS as usize] = -0.5;
        }
        p if DIGITS.contains(&p) => {
            set(&mut row, DIGITS, 0.0);
            row[ANSWER_END as usize] = 2.0;
        }
        MINUS => set(&mut row, DIGITS, 1.0),
        p if LETTERS.contains(&p) => row[ANSWER_END as usize] = 3.0,
        ANSWER_END => row[EOS as usize] = 5.0,
        _ => {
            set(&mut row, WORDS, 0.0);
            row[THINK_END as usize] = 0.0;
        }
    }
    row
}

fn prior(prev: u8) -> &'static Logits {
    static TABLE: OnceLock<Vec<Logits>> = OnceLock::new();
    let t = TABLE.get_or_init(|| (0..=V as u8).map(|p| prior_row(if p as usize == V { PAD } else { p })).collect());
    if prev == PAD {
        &t[V]
    } else {
        &t[prev as usize]
    }
}

/// Softmax of `logits / t`; one-hot on the first maximum when `t` is below
/// the greedy threshold.
pub fn softmax_t(logits: &Logits, t: f64) -> Logits {
    let mut p = [0.0; V];
    if t < GREEDY_T {
        let best = (0..V).fold(0, |b, v| if logits[v] > logits[b] { v } else { b });
        p[best] = 1.0;
        return p;
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in 0..V {
        p[v] = ((logits[v] - m) / t).exp();
        z += p[v];
    }
    p.iter_mut().for_each(|x| *x /= z);
    p
}

/// Log-probability of `a` under `softmax(logits / t)`.
pub fn log_softmax_at(logits: &Logits, t: f64, a: usize) -> f64 {
    if t < GREEDY_T {
        let p = softmax_t(logits, t);
        return if p[a] > 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|l| ((l - m) / t).exp()).sum::<f64>().ln();
    (logits[a] - m) / t - lse
}

/// Tabular autoregressive softmax policy: fixed prior plus a learned logit
/// offset per (prompt, last tokens) context.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxSequencePolicy {
    /// Number of previous tokens in the context, 1 or 2.
    pub order: usize,
    pub temperature: f64,
    params: ParamMap,
}

/// One sampled response with its log-probabilities and per-step entropies.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub tokens: Vec<u32>,
    pub logp: Vec<f64>,
    pub entropy: Vec<f64>,
}

impl Default for SoftmaxSequencePolicy {
    fn default() -> Self {
        SoftmaxSequencePolicy::new(2, 1.0)
    }
}

impl SoftmaxSequencePolicy {
    pub fn new(order: usize, temperature: f64) -> Self {
        assert!((1..=2).contains(&order), "context order must be 1 or 2");
        SoftmaxSequencePolicy { order, temperature, params: ParamMap::new() }
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    /// Number of stored (context, token) parameters.
    pub fn param_count(&self) -> usize {
        self.params.len() * V
    }

    pub fn context(&self, prompt: u64, history: &[u32]) -> Context {
        let last = |k: usize| {
            if history.len() >= k {
                history[history.len() - k] as u8
            } else {
                PAD
            }
        };
        let prev0 = if self.order >= 2 { last(2) } else { PAD };
        Context { prompt, prev: [prev0, last(1)] }
    }

    /// Context for every position of `tokens`.
    pub fn contexts(&self, prompt: u64, tokens: &[u32]) -> Vec<Context> {
        (0..tokens.len()).map(|t| self.context(prompt, &tokens[..t])).collect()
    }

    pub fn logits(&self, ctx: &Context) -> Logits {
        let mut l = *prior(ctx.prev[1]);
        if let Some(d) = self.params.get(ctx) {
            for v in 0..V {
                l[v] += d[v];
            }
        }
        l
    }

    pub fn probs(&self, ctx: &Context) -> Logits {
        softmax_t(&self.logits(ctx), self.temperature)
    }

    pub fn get(&self, ctx: &Context, v: usize) -> f64 {
        self.params.get(ctx).map_or(0.0, |d| d[v])
    }

    pub fn set(&mut self, ctx: Context, v: usize, value: f64) {
        self.params.entry(ctx).or_insert([0.0; V])[v] = value;
    }

    /// `θ ← θ + lr · grad`. A zero step leaves the parameters untouched.
    pub fn ascend(&mut self, grad: &ParamMap, lr: f64) {
        if lr == 0.0 {
            return;
        }
        for (ctx, g) in grad {
            let row = self.params.entry(*ctx).or_insert([0.0; V]);
            for v in 0..V {
                row[v] += lr * g[v];
            }
        }
    }

    /// Log-probabilities of `tokens` under the policy's temperature.
    pub fn logp_sequence(&self, prompt: u64, tokens: &[u32]) -> Vec<f64> {
        self.contexts(prompt, tokens)
            .iter()
            .zip(tokens)
            .map(|(ctx, &a)| log_softmax_at(&self.logits(ctx), self.temperature, a as usize))
            .collect()
    }

    /// Samples until `<eos>` or `max_tokens`, at `temperature`.
    pub fn sample<R: Rng>(&self, prompt: u64, temperature: f64, max_tokens: usize, rng: &mut R) -> Sampled {
        let mut out = Sampled { tokens: Vec::new(), logp: Vec::new(), entropy: Vec::new() };
        while out.tokens.len() < max_tokens {
            let ctx = self.context(prompt, &out.tokens);
            let logits = self.logits(&ctx);
            let p = softmax_t(&logits, temperature);
            let a = if temperature < GREEDY_T {
                p.iter().position(|&x| x == 1.0).expect("one-hot")
            } else {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = V - 1;
                for (v, &pv) in p.iter().enumerate() {
                    acc += pv;
                    if u < acc {
                        pick = v;
                        break;
                    }
                }
                pick
            };
            out.tokens.push(a as u32);
            out.logp.push(log_softmax_at(&logits, temperature, a));
            out.entropy.push(crate::rlcore::entropy(&p));
            if a as u8 == EOS {
                break;
            }
        }
        out
    }
}

/// Text form of a token sequence: tags and digits are written tight, other
/// symbols are space separated, `<eos>` is dropped.
pub fn render(tokens: &[u32]) -> String {
    let mut s = String::new();
    for &t in tokens {
        let t = t as u8;
        if t == EOS {
            continue;
        }
        let piece = VOCAB[t as usize];
        let tight = t <= ANSWER_END || DIGITS.contains(&t) || t == MINUS;
        if !tight && !s.is_empty() && !s.ends_with('>') && !s.ends_with(' ') {
            s.push(' ');
        }
        s.push_str(piece);
    }
    s
}

/// Token ids for a rendered answer like `-12` or `B`, if every symbol is in
/// the vocabulary.
pub fn encode_answer(text: &str) -> Option<Vec<u32>> {
    text.chars()
        .map(|c| VOCAB.iter().position(|v| *v == c.to_string()).map(|i| i as u32))
        .collect()
}
