//! Clipped-surrogate PPO over whole-response transitions, with GAE.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::policy::{softmax, CosineSgd, Gradients, Policy, PolicyError, Response};
use crate::tokens::Token;

/// Which response positions carry the policy-gradient ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenScope {
    ActionOnly,
    Full,
}

#[derive(Debug, Clone, Copy)]
pub struct PpoConfig {
    pub clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    /// Minibatches averaged into one optimizer application.
    pub grad_accum: usize,
    pub gamma: f64,
    pub lam: f64,
    pub scope: TokenScope,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.1,
            entropy_coef: 0.01,
            value_coef: 0.5,
            epochs: 4,
            minibatch_size: 32,
            grad_accum: 1,
            gamma: 0.9,
            lam: 0.95,
            scope: TokenScope::ActionOnly,
        }
    }
}

/// One environment step as seen by the learner.
#[derive(Debug, Clone)]
pub struct Transition {
    pub obs: Vec<f32>,
    pub formula: Vec<Token>,
    pub response: Response,
    pub reward: f64,
    /// State value recorded at rollout time (used by GAE).
    pub value: f64,
    pub done: bool,
}

#[derive(Debug, Default, Clone)]
pub struct RolloutBuffer {
    pub transitions: Vec<Transition>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    finalized: bool,
}

impl RolloutBuffer {
    pub fn push(&mut self, t: Transition) {
        assert!(!self.finalized, "buffer already finalized");
        self.transitions.push(t);
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Compute GAE advantages and returns, then normalize advantages over
    /// the whole buffer.
    pub fn finalize(&mut self, gamma: f64, lam: f64) {
        assert!(!self.finalized, "buffer already finalized");
        let rewards: Vec<f64> = self.transitions.iter().map(|t| t.reward).collect();
        let values: Vec<f64> = self.transitions.iter().map(|t| t.value).collect();
        let dones: Vec<bool> = self.transitions.iter().map(|t| t.done).collect();
        let (adv, ret) = gae(&rewards, &values, &dones, gamma, lam);
        self.returns = ret;
        self.advantages = normalize(&adv);
        self.finalized = true;
    }
}

/// Generalized advantage estimation. The buffer end is treated as terminal
/// (callers collect whole episodes).
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lam: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n);
    let mut adv = vec![0.0; n];
    let mut next_value = 0.0;
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        if dones[t] {
            next_value = 0.0;
            next_adv = 0.0;
        }
        let delta = rewards[t] + gamma * next_value - values[t];
        next_adv = delta + gamma * lam * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

fn normalize(xs: &[f64]) -> Vec<f64> {
    if xs.is_empty() {
        return Vec::new();
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
    let std = var.sqrt().max(1e-8);
    xs.iter().map(|x| (x - mean) / std).collect()
}

/// Response positions the policy gradient flows through.
pub fn scope_positions(response: &Response, scope: TokenScope) -> Vec<usize> {
    let mut out = Vec::new();
    if scope == TokenScope::Full {
        out.extend(response.thought_positions());
    }
    if let Some(p) = response.action_position() {
        out.push(p);
    }
    out
}

/// Scalar clipped-surrogate pieces for one sample. Returns
/// (policy_loss, d_loss/d_new_logprob, clipped).
pub fn clipped_surrogate(new_lp: f64, old_lp: f64, adv: f64, clip: f64) -> (f64, f64, bool) {
    let ratio = (new_lp - old_lp).exp();
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * adv;
    if unclipped <= clipped {
        (-unclipped, -unclipped, false)
    } else {
        (-clipped, 0.0, true)
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub samples: usize,
}

struct SampleStats {
    policy_loss: f64,
    value_loss: f64,
    entropy: f64,
    clipped: bool,
    approx_kl: f64,
}

/// Accumulate the full PPO objective gradient for one transition.
fn accumulate_sample(
    policy: &Policy,
    t: &Transition,
    adv: f64,
    ret: f64,
    cfg: &PpoConfig,
    grads: &mut Gradients,
) -> SampleStats {
    let positions = scope_positions(&t.response, cfg.scope);

    let mut policy_loss = 0.0;
    let mut entropy_mean = 0.0;
    let mut clipped = false;
    let mut approx_kl = 0.0;

    if !positions.is_empty() {
        let caches = policy.teacher_forced(&t.obs, &t.formula, &t.response.tokens);
        let old_lp: f64 = positions.iter().map(|&j| t.response.logprobs[j]).sum();
        let new_lp: f64 = positions
            .iter()
            .map(|&j| caches[j].log_softmax()[t.response.tokens[j].index()])
            .sum();
        let (pl, d_lp, was_clipped) = clipped_surrogate(new_lp, old_lp, adv, cfg.clip);
        policy_loss = pl;
        clipped = was_clipped;
        approx_kl = old_lp - new_lp;

        let n_pos = positions.len() as f64;
        for &j in &positions {
            let cache = &caches[j];
            let probs = softmax(&cache.logits);
            let h: f64 = probs
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum();
            entropy_mean += h / n_pos;
            let target = t.response.tokens[j].index();
            let mut d_logits = vec![0.0; probs.len()];
            for (k, dz) in d_logits.iter_mut().enumerate() {
                let onehot = if k == target { 1.0 } else { 0.0 };
                // Policy term: d lp / d z_k = onehot - p_k.
                *dz += d_lp * (onehot - probs[k]);
                // Entropy bonus: dH/dz_k = -p_k (ln p_k + H).
                if probs[k] > 0.0 {
                    *dz -= cfg.entropy_coef / n_pos * (-probs[k] * (probs[k].ln() + h));
                }
            }
            policy.backward(cache, &d_logits, 0.0, grads);
        }
    }

    // Value head trains at the pre-response position against the GAE return.
    let window = policy.window(&t.formula, &[]);
    let cache = policy.forward(&t.obs, &window);
    let value_loss = 0.5 * (cache.value - ret).powi(2);
    let d_value = cfg.value_coef * (cache.value - ret);
    policy.backward(&cache, &vec![0.0; cache.logits.len()], d_value, grads);

    SampleStats {
        policy_loss,
        value_loss,
        entropy: entropy_mean,
        clipped,
        approx_kl,
    }
}

/// Run `cfg.epochs` PPO epochs over a finalized buffer: shuffled minibatches,
/// frozen rollout log-probs, one optimizer application per minibatch at the
/// learning rate for `lr_step`.
pub fn update(
    policy: &mut Policy,
    buffer: &RolloutBuffer,
    cfg: &PpoConfig,
    sgd: &CosineSgd,
    lr_step: usize,
    rng: &mut impl Rng,
) -> Result<PpoStats, PolicyError> {
    assert!(buffer.finalized, "finalize the buffer before update");
    let mut stats = PpoStats::default();
    let mut clipped_count = 0usize;
    let n = buffer.len();
    if n == 0 {
        return Ok(stats);
    }

    let accum = cfg.grad_accum.max(1);
    let mut indices: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        indices.shuffle(rng);
        let chunks: Vec<&[usize]> = indices.chunks(cfg.minibatch_size).collect();
        for group in chunks.chunks(accum) {
            let mut grads = Gradients::zeros(policy);
            let mut group_samples = 0usize;
            for chunk in group {
                for &i in *chunk {
                    let t = &buffer.transitions[i];
                    let s = accumulate_sample(
                        policy,
                        t,
                        buffer.advantages[i],
                        buffer.returns[i],
                        cfg,
                        &mut grads,
                    );
                    stats.policy_loss += s.policy_loss;
                    stats.value_loss += s.value_loss;
                    stats.entropy += s.entropy;
                    stats.approx_kl += s.approx_kl;
                    clipped_count += s.clipped as usize;
                    stats.samples += 1;
                    group_samples += 1;
                }
            }
            grads.scale(1.0 / group_samples as f64);
            sgd.apply(policy, &grads, lr_step)?;
        }
    }

    let m = stats.samples as f64;
    stats.policy_loss /= m;
    stats.value_loss /= m;
    stats.entropy /= m;
    stats.approx_kl /= m;
    stats.clip_fraction = clipped_count as f64 / m;
    Ok(stats)
}

/// Accumulate the objective gradient for a single transition without touching
/// the optimizer; returns (policy_loss, value_loss, entropy). The value loss
/// is reported without the `value_coef` factor.
pub fn transition_grad(
    policy: &Policy,
    t: &Transition,
    adv: f64,
    ret: f64,
    cfg: &PpoConfig,
    grads: &mut Gradients,
) -> (f64, f64, f64) {
    let s = accumulate_sample(policy, t, adv, ret, cfg, grads);
    (s.policy_loss, s.value_loss, s.entropy)
}
