//! Thought guidance from the merged teacher: SFT imitation with DAgger-style
//! dataset aggregation, and reverse-KL auxiliary reward shaping.

use rand::Rng;

use crate::policy::{softmax, Gradients, Policy, Response, SampleConfig};
use crate::tokens::{self, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Sft,
    Kl,
}

/// Which response span guidance covers: reasoning tokens only, or reasoning
/// plus the action token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceScope {
    Thought,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    K1,
    Clip,
    Abs,
    K3,
    Forward,
}

#[derive(Debug, Clone, Copy)]
pub struct GuidanceConfig {
    pub variant: Variant,
    pub scope: GuidanceScope,
    pub estimator: Estimator,
    pub beta: f64,
    pub thought_prob: f64,
    pub format_penalty: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Kl,
            scope: GuidanceScope::Thought,
            estimator: Estimator::Clip,
            beta: 1.0,
            thought_prob: 0.5,
            format_penalty: -0.1,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.beta < 0.0 {
            return Err(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(0.0..=1.0).contains(&self.thought_prob) {
            return Err(format!(
                "thought_prob must be in [0,1], got {}",
                self.thought_prob
            ));
        }
        Ok(())
    }
}

/// One imitation example: a state and what the teacher said there.
#[derive(Debug, Clone)]
pub struct SftPair {
    pub obs: Vec<f32>,
    pub formula: Vec<Token>,
    pub thought: Vec<Token>,
    pub action: Option<Token>,
}

/// Append-only imitation dataset; minibatches sample uniformly over the full
/// history so old states keep anchoring the policy.
#[derive(Debug, Default, Clone)]
pub struct ThoughtDataset {
    pairs: Vec<SftPair>,
}

impl ThoughtDataset {
    pub fn push(&mut self, pair: SftPair) {
        self.pairs.push(pair);
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[SftPair] {
        &self.pairs
    }

    pub fn sample_batch(&self, n: usize, rng: &mut impl Rng) -> Vec<&SftPair> {
        (0..n)
            .map(|_| &self.pairs[rng.gen_range(0..self.pairs.len())])
            .collect()
    }
}

/// Full structured token sequence for a teacher example.
pub fn pair_tokens(pair: &SftPair) -> Vec<Token> {
    let mut toks = vec![tokens::BOT];
    toks.extend(&pair.thought);
    toks.push(tokens::EOT);
    if let Some(a) = pair.action {
        toks.push(tokens::BOA);
        toks.push(a);
        toks.push(tokens::EOA);
    }
    toks
}

fn pair_positions(pair: &SftPair, scope: GuidanceScope, all: bool) -> Vec<usize> {
    let toks = pair_tokens(pair);
    if all {
        return (0..toks.len()).collect();
    }
    let mut pos: Vec<usize> = (1..1 + pair.thought.len()).collect();
    if scope == GuidanceScope::Full && pair.action.is_some() {
        pos.push(1 + pair.thought.len() + 2); // BOT thought* EOT BOA <action>
    }
    pos
}

/// Mean summed negative log-likelihood of the guided positions, with the
/// cross-entropy gradient accumulated into `grads`. `all_positions` trains
/// every token of the structured response (used for SFT initialization).
pub fn sft_loss_grad(
    policy: &Policy,
    batch: &[&SftPair],
    scope: GuidanceScope,
    all_positions: bool,
    grads: &mut Gradients,
) -> f64 {
    assert!(!batch.is_empty(), "empty SFT batch");
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for pair in batch {
        let toks = pair_tokens(pair);
        let caches = policy.teacher_forced(&pair.obs, &pair.formula, &toks);
        for j in pair_positions(pair, scope, all_positions) {
            let cache = &caches[j];
            let target = toks[j].index();
            let lps = cache.log_softmax();
            total += -lps[target] * scale;
            let probs = softmax(&cache.logits);
            let d_logits: Vec<f64> = probs
                .iter()
                .enumerate()
                .map(|(k, &p)| scale * (p - if k == target { 1.0 } else { 0.0 }))
                .collect();
            policy.backward(cache, &d_logits, 0.0, grads);
        }
    }
    total
}

/// Loss only, for evaluation and finite-difference checks.
pub fn sft_loss(policy: &Policy, batch: &[&SftPair], scope: GuidanceScope, all: bool) -> f64 {
    let mut total = 0.0;
    for pair in batch {
        let toks = pair_tokens(pair);
        let lps = policy.logprobs(&pair.obs, &pair.formula, &toks);
        for j in pair_positions(pair, scope, all) {
            total -= lps[j];
        }
    }
    total / batch.len() as f64
}

/// Query the merged teacher for a reference thought at the current state.
/// Fires with probability `thought_prob`; retries malformed generations with
/// temperature x1.1 per attempt, capped at 0.9, then gives up.
pub fn teacher_reference(
    teacher: &Policy,
    obs: &[f32],
    formula: &[Token],
    cfg: &GuidanceConfig,
    rng: &mut impl Rng,
) -> Option<SftPair> {
    teacher_reference_with(teacher, obs, formula, cfg, &retry_temperatures(), rng)
}

/// As `teacher_reference` with an explicit retry temperature schedule.
pub fn teacher_reference_with(
    teacher: &Policy,
    obs: &[f32],
    formula: &[Token],
    cfg: &GuidanceConfig,
    temperatures: &[f64],
    rng: &mut impl Rng,
) -> Option<SftPair> {
    if cfg.thought_prob <= 0.0 || !rng.gen_bool(cfg.thought_prob) {
        return None;
    }
    for &temperature in temperatures {
        let resp = teacher.sample_response(
            obs,
            formula,
            SampleConfig {
                temperature,
                repetition_penalty: 1.2,
            },
            rng,
        );
        if resp.well_formed {
            return Some(SftPair {
                obs: obs.to_vec(),
                formula: formula.to_vec(),
                thought: resp.thought,
                action: resp.action,
            });
        }
    }
    None
}

/// The retry schedule: 0.2, 0.22, 0.242, ... with a final attempt at 0.9.
pub fn retry_temperatures() -> Vec<f64> {
    retry_temperatures_with(0.2, 1.1, 0.9)
}

pub fn retry_temperatures_with(base: f64, coef: f64, cap: f64) -> Vec<f64> {
    assert!(base > 0.0 && coef > 1.0 && cap >= base);
    let mut out = vec![base];
    loop {
        let next = out.last().unwrap() * coef;
        if next >= cap {
            out.push(cap);
            return out;
        }
        out.push(next);
    }
}

/// Per-token K1 samples and their sentence mean.
#[derive(Debug, Clone)]
pub struct RevKl {
    pub per_token: Vec<f64>,
    pub mean: f64,
    pub empty: bool,
}

pub fn revkl_from_logprobs(agent_lps: &[f64], teacher_lps: &[f64]) -> RevKl {
    assert_eq!(agent_lps.len(), teacher_lps.len());
    if agent_lps.is_empty() {
        return RevKl {
            per_token: Vec::new(),
            mean: 0.0,
            empty: true,
        };
    }
    let per_token: Vec<f64> = agent_lps
        .iter()
        .zip(teacher_lps)
        .map(|(a, t)| a - t)
        .collect();
    let mean = per_token.iter().sum::<f64>() / per_token.len() as f64;
    RevKl {
        per_token,
        mean,
        empty: false,
    }
}

/// Sentence reverse KL between agent and teacher at the guided positions of a
/// sampled response. One teacher-forced pass per model, no teacher sampling.
pub fn revkl(
    agent: &Policy,
    teacher: &Policy,
    obs: &[f32],
    formula: &[Token],
    response: &Response,
    scope: GuidanceScope,
) -> RevKl {
    let mut positions: Vec<usize> = response.thought_positions().collect();
    if scope == GuidanceScope::Full {
        if let Some(p) = response.action_position() {
            positions.push(p);
        }
    }
    if positions.is_empty() {
        return revkl_from_logprobs(&[], &[]);
    }
    let agent_lps = agent.logprobs(obs, formula, &response.tokens);
    let teacher_lps = teacher.logprobs(obs, formula, &response.tokens);
    let a: Vec<f64> = positions.iter().map(|&j| agent_lps[j]).collect();
    let t: Vec<f64> = positions.iter().map(|&j| teacher_lps[j]).collect();
    revkl_from_logprobs(&a, &t)
}

/// Collapse per-token K1 samples into the configured scalar estimate.
pub fn estimate(kl: &RevKl, estimator: Estimator) -> f64 {
    if kl.empty {
        return 0.0;
    }
    match estimator {
        Estimator::K1 => kl.mean,
        Estimator::Clip => kl.mean.max(0.0),
        Estimator::Abs => kl.mean.abs(),
        Estimator::K3 => {
            kl.per_token
                .iter()
                .map(|&x| x + (-x).exp() - 1.0)
                .sum::<f64>()
                / kl.per_token.len() as f64
        }
        Estimator::Forward => (-kl.mean).max(0.0),
    }
}

pub fn shape_reward(env_reward: f64, estimate: f64, beta: f64) -> f64 {
    env_reward - beta * estimate
}

pub fn format_reward(response: &Response, format_penalty: f64) -> f64 {
    if response.well_formed {
        0.0
    } else {
        format_penalty
    }
}
