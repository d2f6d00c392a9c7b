//! The tiny autoregressive thought-and-action policy: a fixed-window MLP
//! over observation features and the last W token embeddings, with a logit
//! head and a value head. Math runs in f64; parameters live in f32 so they
//! roundtrip through the checkpoint format losslessly.

use std::ops::Range;

use rand::Rng;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::tensor::Tensor;
use crate::tokens::{self, Token, VOCAB_SIZE};

/// Reserved checkpoint name prefix for architecture metadata.
pub const META_PREFIX: &str = "meta.";
const META_ARCH: &str = "meta.arch";

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint does not describe this architecture: {0}")]
    ArchitectureMismatch(String),
    #[error("non-finite gradient at parameter index {0}")]
    NonFiniteGradient(usize),
    #[error("observation has {got} features, spec wants {want}")]
    ObservationDim { got: usize, want: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicySpec {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub context_window: usize,
    pub max_thought_len: usize,
    pub obs_dim: usize,
}

impl Default for PolicySpec {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden_dim: 64,
            context_window: 16,
            max_thought_len: 32,
            obs_dim: crate::env::OBS_DIM,
        }
    }
}

impl PolicySpec {
    fn input_dim(&self) -> usize {
        (self.context_window + 1) * self.embed_dim
    }

    /// Hard cap on emitted response tokens: BOT + thought + EOT + BOA + act + EOA.
    pub fn max_response_len(&self) -> usize {
        self.max_thought_len + 5
    }
}

#[derive(Debug, Clone)]
struct Layout {
    embed: Range<usize>,
    obs_proj: Range<usize>,
    w1: Range<usize>,
    b1: Range<usize>,
    w2: Range<usize>,
    b2: Range<usize>,
    wl: Range<usize>,
    bl: Range<usize>,
    wv: Range<usize>,
    bv: Range<usize>,
    total: usize,
}

impl Layout {
    fn new(spec: &PolicySpec) -> Self {
        let (d, h, v, f) = (
            spec.embed_dim,
            spec.hidden_dim,
            VOCAB_SIZE,
            spec.obs_dim,
        );
        let input = spec.input_dim();
        let mut cursor = 0usize;
        let mut take = |n: usize| {
            let r = cursor..cursor + n;
            cursor += n;
            r
        };
        Self {
            embed: take(v * d),
            obs_proj: take(f * d),
            w1: take(input * h),
            b1: take(h),
            w2: take(h * h),
            b2: take(h),
            wl: take(h * v),
            bl: take(v),
            wv: take(h),
            bv: take(1),
            total: cursor,
        }
    }

    fn named(&self, spec: &PolicySpec) -> Vec<(&'static str, Vec<usize>, Range<usize>)> {
        let (d, h, v, f) = (
            spec.embed_dim,
            spec.hidden_dim,
            VOCAB_SIZE,
            spec.obs_dim,
        );
        vec![
            ("embed.token", vec![v, d], self.embed.clone()),
            ("proj.obs", vec![f, d], self.obs_proj.clone()),
            ("mlp.w1", vec![spec.input_dim(), h], self.w1.clone()),
            ("mlp.b1", vec![h], self.b1.clone()),
            ("mlp.w2", vec![h, h], self.w2.clone()),
            ("mlp.b2", vec![h], self.b2.clone()),
            ("head.logit.w", vec![h, v], self.wl.clone()),
            ("head.logit.b", vec![v], self.bl.clone()),
            ("head.value.w", vec![h, 1], self.wv.clone()),
            ("head.value.b", vec![1], self.bv.clone()),
        ]
    }
}

/// Policy parameters plus the architecture they realize.
#[derive(Debug, Clone)]
pub struct Policy {
    pub spec: PolicySpec,
    layout: Layout,
    params: Vec<f32>,
}

/// Flat gradient buffer matching a policy's parameter layout.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub values: Vec<f64>,
}

impl Gradients {
    pub fn zeros(policy: &Policy) -> Self {
        Self {
            values: vec![0.0; policy.params.len()],
        }
    }

    pub fn scale(&mut self, a: f64) {
        for v in &mut self.values {
            *v *= a;
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Cached activations from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    obs: Vec<f32>,
    window: Vec<Token>,
    x: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    pub logits: Vec<f64>,
    pub value: f64,
}

impl ForwardCache {
    pub fn log_softmax(&self) -> Vec<f64> {
        log_softmax(&self.logits)
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).iter().map(|l| l.exp()).collect()
}

/// A generated response: `BOT thought* EOT BOA action EOA`.
#[derive(Debug, Clone)]
pub struct Response {
    /// Every emitted token, structural ones included.
    pub tokens: Vec<Token>,
    /// Unmodified model log-prob of each emitted token.
    pub logprobs: Vec<f64>,
    pub thought: Vec<Token>,
    pub action: Option<Token>,
    pub well_formed: bool,
}

impl Response {
    /// Index of the action token within `tokens`, if one was emitted.
    pub fn action_position(&self) -> Option<usize> {
        self.action.map(|_| 2 + self.thought.len() + 1)
    }

    /// Indices of thought tokens within `tokens`.
    pub fn thought_positions(&self) -> Range<usize> {
        1..1 + self.thought.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SampleConfig {
    pub temperature: f64,
    pub repetition_penalty: f64,
}

impl Policy {
    pub fn zeros(spec: PolicySpec) -> Self {
        let layout = Layout::new(&spec);
        let params = vec![0.0; layout.total];
        Self {
            spec,
            layout,
            params,
        }
    }

    /// Random initialization: ~1/sqrt(fan_in) weights, zero biases, small
    /// value head.
    pub fn init(spec: PolicySpec, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(spec);
        let gauss = |rng: &mut dyn rand::RngCore, std: f64| -> f32 {
            // Box-Muller from two uniforms.
            let u1: f64 = rand::Rng::gen_range(rng, 1e-12..1.0);
            let u2: f64 = rand::Rng::gen_range(rng, 0.0..1.0);
            (std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
        };
        let ranges = [
            (p.layout.embed.clone(), 0.5),
            (p.layout.obs_proj.clone(), 0.5),
            (p.layout.w1.clone(), 1.0 / (spec.input_dim() as f64).sqrt()),
            (p.layout.w2.clone(), 1.0 / (spec.hidden_dim as f64).sqrt()),
            (p.layout.wl.clone(), 1.0 / (spec.hidden_dim as f64).sqrt()),
            (p.layout.wv.clone(), 0.01),
        ];
        for (range, std) in ranges {
            for i in range {
                p.params[i] = gauss(rng, std);
            }
        }
        p
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    /// Last W context tokens (formula then generated response so far),
    /// left-padded with PAD.
    pub fn window(&self, formula: &[Token], generated: &[Token]) -> Vec<Token> {
        let w = self.spec.context_window;
        let mut seq: Vec<Token> = formula.iter().chain(generated).copied().collect();
        if seq.len() > w {
            seq.drain(..seq.len() - w);
        }
        let mut out = vec![tokens::PAD; w - seq.len()];
        out.append(&mut seq);
        out
    }

    pub fn forward(&self, obs: &[f32], window: &[Token]) -> ForwardCache {
        assert_eq!(obs.len(), self.spec.obs_dim, "observation feature dim");
        assert_eq!(window.len(), self.spec.context_window, "window length");
        let (d, h, v) = (self.spec.embed_dim, self.spec.hidden_dim, VOCAB_SIZE);
        let input = self.spec.input_dim();
        let p = &self.params;
        let l = &self.layout;

        let mut x = vec![0.0f64; input];
        for (f, &o) in obs.iter().enumerate() {
            if o != 0.0 {
                let row = l.obs_proj.start + f * d;
                for j in 0..d {
                    x[j] += o as f64 * p[row + j] as f64;
                }
            }
        }
        for (slot, &tok) in window.iter().enumerate() {
            let row = l.embed.start + tok.index() * d;
            let base = (slot + 1) * d;
            for j in 0..d {
                x[base + j] = p[row + j] as f64;
            }
        }

        let mut h1 = vec![0.0f64; h];
        for (k, h1k) in h1.iter_mut().enumerate() {
            let mut acc = p[l.b1.start + k] as f64;
            for (i, &xi) in x.iter().enumerate() {
                acc += xi * p[l.w1.start + i * h + k] as f64;
            }
            *h1k = acc.tanh();
        }

        let mut h2 = vec![0.0f64; h];
        for (k, h2k) in h2.iter_mut().enumerate() {
            let mut acc = p[l.b2.start + k] as f64;
            for (j, &h1j) in h1.iter().enumerate() {
                acc += h1j * p[l.w2.start + j * h + k] as f64;
            }
            *h2k = acc.tanh();
        }

        let mut logits = vec![0.0f64; v];
        for (vi, lv) in logits.iter_mut().enumerate() {
            let mut acc = p[l.bl.start + vi] as f64;
            for (j, &h2j) in h2.iter().enumerate() {
                acc += h2j * p[l.wl.start + j * v + vi] as f64;
            }
            *lv = acc;
        }

        let mut value = p[l.bv.start] as f64;
        for (j, &h2j) in h2.iter().enumerate() {
            value += h2j * p[l.wv.start + j] as f64;
        }

        ForwardCache {
            obs: obs.to_vec(),
            window: window.to_vec(),
            x,
            h1,
            h2,
            logits,
            value,
        }
    }

    /// State value with no generated tokens yet.
    pub fn state_value(&self, obs: &[f32], formula: &[Token]) -> f64 {
        self.forward(obs, &self.window(formula, &[])).value
    }

    /// Accumulate analytic gradients for a position given upstream
    /// d(loss)/d(logits) and d(loss)/d(value).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_logits: &[f64],
        d_value: f64,
        grads: &mut Gradients,
    ) {
        let (d, h, v) = (self.spec.embed_dim, self.spec.hidden_dim, VOCAB_SIZE);
        let p = &self.params;
        let l = &self.layout;
        let g = &mut grads.values;

        // Heads.
        let mut d_h2 = vec![0.0f64; h];
        for j in 0..h {
            let mut acc = p[l.wv.start + j] as f64 * d_value;
            for (vi, &dl) in d_logits.iter().enumerate() {
                acc += p[l.wl.start + j * v + vi] as f64 * dl;
                g[l.wl.start + j * v + vi] += cache.h2[j] * dl;
            }
            g[l.wv.start + j] += cache.h2[j] * d_value;
            d_h2[j] = acc;
        }
        for (vi, &dl) in d_logits.iter().enumerate() {
            g[l.bl.start + vi] += dl;
        }
        g[l.bv.start] += d_value;

        // Second hidden layer.
        let mut d_h1 = vec![0.0f64; h];
        for (j, dh) in d_h2.iter_mut().enumerate() {
            *dh *= 1.0 - cache.h2[j] * cache.h2[j];
        }
        for i in 0..h {
            let mut acc = 0.0;
            for (j, &da) in d_h2.iter().enumerate() {
                acc += p[l.w2.start + i * h + j] as f64 * da;
                g[l.w2.start + i * h + j] += cache.h1[i] * da;
            }
            d_h1[i] = acc;
        }
        for (j, &da) in d_h2.iter().enumerate() {
            g[l.b2.start + j] += da;
        }

        // First hidden layer.
        let mut d_x = vec![0.0f64; cache.x.len()];
        for (i, dh) in d_h1.iter_mut().enumerate() {
            *dh *= 1.0 - cache.h1[i] * cache.h1[i];
        }
        for (i, dx) in d_x.iter_mut().enumerate() {
            let mut acc = 0.0;
            let xi = cache.x[i];
            for (k, &da) in d_h1.iter().enumerate() {
                acc += p[l.w1.start + i * h + k] as f64 * da;
                g[l.w1.start + i * h + k] += xi * da;
            }
            *dx = acc;
        }
        for (k, &da) in d_h1.iter().enumerate() {
            g[l.b1.start + k] += da;
        }

        // Observation projection and token embeddings.
        for (f, &o) in cache.obs.iter().enumerate() {
            if o != 0.0 {
                let row = l.obs_proj.start + f * d;
                for j in 0..d {
                    g[row + j] += o as f64 * d_x[j];
                }
            }
        }
        for (slot, &tok) in cache.window.iter().enumerate() {
            let row = l.embed.start + tok.index() * d;
            let base = (slot + 1) * d;
            for j in 0..d {
                g[row + j] += d_x[base + j];
            }
        }
    }

    /// Teacher-forced caches for each position of a response continuation.
    /// `caches[j]` is the forward pass that predicts `response_tokens[j]`.
    pub fn teacher_forced(
        &self,
        obs: &[f32],
        formula: &[Token],
        response_tokens: &[Token],
    ) -> Vec<ForwardCache> {
        let mut out = Vec::with_capacity(response_tokens.len());
        for j in 0..response_tokens.len() {
            let window = self.window(formula, &response_tokens[..j]);
            out.push(self.forward(obs, &window));
        }
        out
    }

    /// Per-token log-probs of a supplied response, teacher-forced.
    pub fn logprobs(&self, obs: &[f32], formula: &[Token], response_tokens: &[Token]) -> Vec<f64> {
        self.teacher_forced(obs, formula, response_tokens)
            .iter()
            .zip(response_tokens)
            .map(|(c, t)| c.log_softmax()[t.index()])
            .collect()
    }

    /// Autoregressively sample a structured response. The recorded log-probs
    /// are the unmodified model log-probs of the emitted tokens; temperature
    /// and repetition penalty shape only the selection.
    pub fn sample_response(
        &self,
        obs: &[f32],
        formula: &[Token],
        cfg: SampleConfig,
        rng: &mut impl Rng,
    ) -> Response {
        assert!(cfg.temperature > 0.0, "temperature must be positive");
        assert!(cfg.repetition_penalty >= 1.0, "penalty must be >= 1");

        #[derive(PartialEq)]
        enum Phase {
            ExpectBot,
            Thought,
            ExpectBoa,
            ExpectAction,
            ExpectEoa,
        }

        let mut resp = Response {
            tokens: Vec::new(),
            logprobs: Vec::new(),
            thought: Vec::new(),
            action: None,
            well_formed: false,
        };
        let mut phase = Phase::ExpectBot;
        let mut seen = [false; VOCAB_SIZE];

        while resp.tokens.len() < self.spec.max_response_len() {
            let window = self.window(formula, &resp.tokens);
            let cache = self.forward(obs, &window);
            resp.logprobs.push(f64::NAN); // patched below once token chosen

            let mut adjusted = cache.logits.clone();
            if cfg.repetition_penalty > 1.0 {
                for (i, z) in adjusted.iter_mut().enumerate() {
                    if seen[i] {
                        if *z > 0.0 {
                            *z /= cfg.repetition_penalty;
                        } else {
                            *z *= cfg.repetition_penalty;
                        }
                    }
                }
            }
            for z in &mut adjusted {
                *z /= cfg.temperature;
            }
            let probs = softmax(&adjusted);
            let tok = Token(sample_categorical(&probs, rng) as u8);

            *resp.logprobs.last_mut().unwrap() = cache.log_softmax()[tok.index()];
            resp.tokens.push(tok);
            seen[tok.index()] = true;

            match phase {
                Phase::ExpectBot => {
                    if tok != tokens::BOT {
                        return resp;
                    }
                    phase = Phase::Thought;
                }
                Phase::Thought => {
                    if tok == tokens::EOT {
                        phase = Phase::ExpectBoa;
                    } else if tok.is_action() && resp.thought.len() < self.spec.max_thought_len {
                        resp.thought.push(tok);
                    } else {
                        return resp; // structural break or overlong thought
                    }
                }
                Phase::ExpectBoa => {
                    if tok != tokens::BOA {
                        return resp;
                    }
                    phase = Phase::ExpectAction;
                }
                Phase::ExpectAction => {
                    if !tok.is_action() {
                        return resp;
                    }
                    resp.action = Some(tok);
                    phase = Phase::ExpectEoa;
                }
                Phase::ExpectEoa => {
                    resp.well_formed = tok == tokens::EOA;
                    return resp;
                }
            }
        }
        resp // ran out of budget mid-structure
    }

    pub fn to_checkpoint(&self, step_id: u64, tag: impl Into<String>) -> Checkpoint {
        let mut c = Checkpoint::new(step_id, tag);
        let meta = vec![
            self.spec.embed_dim as f32,
            self.spec.hidden_dim as f32,
            self.spec.context_window as f32,
            self.spec.max_thought_len as f32,
            self.spec.obs_dim as f32,
        ];
        c.insert(META_ARCH, Tensor::new(vec![meta.len()], meta).unwrap())
            .expect("static names are valid");
        for (name, shape, range) in self.layout.named(&self.spec) {
            c.insert(
                name,
                Tensor::new(shape, self.params[range].to_vec()).unwrap(),
            )
            .expect("static names are valid");
        }
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, PolicyError> {
        let meta = ckpt
            .get(META_ARCH)
            .ok_or_else(|| PolicyError::ArchitectureMismatch("missing meta.arch".into()))?;
        if meta.len() != 5 {
            return Err(PolicyError::ArchitectureMismatch(format!(
                "meta.arch has {} entries",
                meta.len()
            )));
        }
        let m = meta.data();
        let spec = PolicySpec {
            embed_dim: m[0] as usize,
            hidden_dim: m[1] as usize,
            context_window: m[2] as usize,
            max_thought_len: m[3] as usize,
            obs_dim: m[4] as usize,
        };
        let mut policy = Self::zeros(spec);
        for (name, shape, range) in policy.layout.named(&spec) {
            let t = ckpt.get(name).ok_or_else(|| {
                PolicyError::ArchitectureMismatch(format!("missing tensor {name}"))
            })?;
            if t.shape() != shape.as_slice() {
                return Err(PolicyError::ArchitectureMismatch(format!(
                    "tensor {name}: shape {:?}, want {shape:?}",
                    t.shape()
                )));
            }
            policy.params[range].copy_from_slice(t.data());
        }
        Ok(policy)
    }
}

fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = probs.iter().sum();
    let mut dart: f64 = rng.gen_range(0.0..1.0) * total;
    for (i, &p) in probs.iter().enumerate() {
        dart -= p;
        if dart <= 0.0 {
            return i;
        }
    }
    probs.len() - 1
}

/// Cosine-annealed SGD with a hard clamp at the final rate.
#[derive(Debug, Clone, Copy)]
pub struct CosineSgd {
    pub initial_lr: f64,
    pub final_lr: f64,
    pub max_steps: usize,
}

impl CosineSgd {
    pub fn lr(&self, step: usize) -> f64 {
        if step >= self.max_steps {
            return self.final_lr;
        }
        let t = step as f64 / self.max_steps as f64;
        self.final_lr
            + 0.5 * (self.initial_lr - self.final_lr) * (1.0 + (std::f64::consts::PI * t).cos())
    }

    /// `params <- params - lr(step) * grads`.
    pub fn apply(
        &self,
        policy: &mut Policy,
        grads: &Gradients,
        step: usize,
    ) -> Result<(), PolicyError> {
        if let Some(i) = grads.values.iter().position(|v| !v.is_finite()) {
            return Err(PolicyError::NonFiniteGradient(i));
        }
        let lr = self.lr(step);
        for (p, &g) in policy.params.iter_mut().zip(&grads.values) {
            *p = (*p as f64 - lr * g) as f32;
        }
        Ok(())
    }
}
