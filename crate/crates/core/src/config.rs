//! Flat key=value training configuration with strict validation.

use std::collections::BTreeSet;
use std::path::Path;

use thiserror::Error;

use crate::guidance::{Estimator, GuidanceConfig, GuidanceScope, Variant};
use crate::merge::{EmaMode, MergeConfig, MergeMethod, Weighting};
use crate::policy::PolicySpec;
use crate::ppo::{PpoConfig, TokenScope};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {0}: expected key=value, got {1:?}")]
    Syntax(usize, String),
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("duplicate key {0:?}")]
    DuplicateKey(String),
    #[error("key {key}: invalid value {value:?} ({reason})")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Every run-level knob, desk-scale defaults. Larger-scale values remain
/// valid settings.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub variant: Variant,
    pub seed: u64,
    pub out_dir: String,

    // Budget and cadence.
    pub env_steps: usize,
    pub buffer_size: usize,
    pub eval_cadence: usize,
    pub eval_episodes: usize,

    // PPO.
    pub discount: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub ppo_epochs: usize,
    pub minibatch_size: usize,
    pub grad_accum: usize,

    // Optimizer schedule.
    pub lr_initial: f64,
    pub lr_final: f64,
    pub lr_steps: usize,

    // Generation.
    pub temperature: f64,
    pub repetition_penalty: f64,

    // Teacher retries.
    pub teacher_retry_coef: f64,
    pub teacher_max_temperature: f64,

    // Architecture.
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub context_window: usize,
    pub max_thought_len: usize,

    // Merging.
    pub merge_method: MergeMethod,
    pub ties_density: f64,
    pub weighting: Weighting,
    pub alpha: f64,
    pub ema_mode: EmaMode,

    // Guidance.
    pub scope: GuidanceScope,
    pub estimator: Estimator,
    pub beta: f64,
    pub thought_prob: f64,
    pub format_penalty: f64,
    /// Fold RevKL into normalized advantages instead of the pre-GAE reward.
    pub advantage_side_kl: bool,

    // SFT initialization from solver labels.
    pub sft_init: bool,
    pub sft_init_hands: usize,
    pub sft_init_steps: usize,
    pub sft_batch_size: usize,

    pub emit_svg: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Kl,
            seed: 1,
            out_dir: "run".into(),
            env_steps: 15_360, // 60 epochs of B = 256
            buffer_size: 256,
            eval_cadence: 1,
            eval_episodes: 200,
            discount: 0.9,
            gae_lambda: 0.95,
            clip: 0.1,
            entropy_coef: 0.01,
            value_coef: 0.5,
            ppo_epochs: 4,
            minibatch_size: 32,
            grad_accum: 8,
            lr_initial: 0.003,
            lr_final: 1e-4,
            lr_steps: 60,
            temperature: 0.2,
            repetition_penalty: 1.2,
            teacher_retry_coef: 1.1,
            teacher_max_temperature: 0.9,
            embed_dim: 32,
            hidden_dim: 64,
            context_window: 16,
            max_thought_len: 32,
            merge_method: MergeMethod::Ties,
            ties_density: 0.8,
            weighting: Weighting::Sma,
            alpha: 0.5,
            ema_mode: EmaMode::ClosedForm,
            scope: GuidanceScope::Thought,
            estimator: Estimator::Clip,
            beta: 1.0,
            thought_prob: 0.5,
            format_penalty: -0.1,
            advantage_side_kl: false,
            sft_init: true,
            sft_init_hands: 800,
            sft_init_steps: 1500,
            sft_batch_size: 32,
            emit_svg: false,
        }
    }
}

const KEYS: &[&str] = &[
    "variant",
    "seed",
    "out_dir",
    "env_steps",
    "buffer_size",
    "eval_cadence",
    "eval_episodes",
    "discount",
    "gae_lambda",
    "clip",
    "entropy_coef",
    "value_coef",
    "ppo_epochs",
    "minibatch_size",
    "grad_accum",
    "lr_initial",
    "lr_final",
    "lr_steps",
    "temperature",
    "repetition_penalty",
    "teacher_retry_coef",
    "teacher_max_temperature",
    "embed_dim",
    "hidden_dim",
    "context_window",
    "max_thought_len",
    "merge_method",
    "ties_density",
    "weighting",
    "alpha",
    "ema_mode",
    "scope",
    "estimator",
    "beta",
    "thought_prob",
    "format_penalty",
    "advantage_side_kl",
    "sft_init",
    "sft_init_hands",
    "sft_init_steps",
    "sft_batch_size",
    "emit_svg",
];

fn bad(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: reason.into(),
    }
}

impl TrainConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str(&text)
    }

    /// Parse `key = value` lines over the defaults. `#` starts a comment.
    pub fn from_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax(lineno + 1, line.to_string()))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey(key.into()));
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::DuplicateKey(key.into()));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
            value
                .parse()
                .map_err(|_| bad(key, value, format!("not a {}", std::any::type_name::<T>())))
        }
        match key {
            "variant" => {
                self.variant = match value {
                    "sft" => Variant::Sft,
                    "kl" => Variant::Kl,
                    _ => return Err(bad(key, value, "expected sft|kl")),
                }
            }
            "seed" => self.seed = parse(key, value)?,
            "out_dir" => self.out_dir = value.to_string(),
            "env_steps" => self.env_steps = parse(key, value)?,
            "buffer_size" => self.buffer_size = parse(key, value)?,
            "eval_cadence" => self.eval_cadence = parse(key, value)?,
            "eval_episodes" => self.eval_episodes = parse(key, value)?,
            "discount" => self.discount = parse(key, value)?,
            "gae_lambda" => self.gae_lambda = parse(key, value)?,
            "clip" => self.clip = parse(key, value)?,
            "entropy_coef" => self.entropy_coef = parse(key, value)?,
            "value_coef" => self.value_coef = parse(key, value)?,
            "ppo_epochs" => self.ppo_epochs = parse(key, value)?,
            "minibatch_size" => self.minibatch_size = parse(key, value)?,
            "grad_accum" => self.grad_accum = parse(key, value)?,
            "lr_initial" => self.lr_initial = parse(key, value)?,
            "lr_final" => self.lr_final = parse(key, value)?,
            "lr_steps" => self.lr_steps = parse(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            "repetition_penalty" => self.repetition_penalty = parse(key, value)?,
            "teacher_retry_coef" => self.teacher_retry_coef = parse(key, value)?,
            "teacher_max_temperature" => self.teacher_max_temperature = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "hidden_dim" => self.hidden_dim = parse(key, value)?,
            "context_window" => self.context_window = parse(key, value)?,
            "max_thought_len" => self.max_thought_len = parse(key, value)?,
            "merge_method" => {
                self.merge_method = match value {
                    "linear" => MergeMethod::Linear,
                    "ties" => MergeMethod::Ties,
                    _ => return Err(bad(key, value, "expected linear|ties")),
                }
            }
            "ties_density" => self.ties_density = parse(key, value)?,
            "weighting" => {
                self.weighting = match value {
                    "sma" => Weighting::Sma,
                    "ema" => Weighting::Ema,
                    _ => return Err(bad(key, value, "expected sma|ema")),
                }
            }
            "alpha" => self.alpha = parse(key, value)?,
            "ema_mode" => {
                self.ema_mode = match value {
                    "recursive" => EmaMode::Recursive,
                    "closed_form" => EmaMode::ClosedForm,
                    _ => return Err(bad(key, value, "expected recursive|closed_form")),
                }
            }
            "scope" => {
                self.scope = match value {
                    "thought" => GuidanceScope::Thought,
                    "full" => GuidanceScope::Full,
                    _ => return Err(bad(key, value, "expected thought|full")),
                }
            }
            "estimator" => {
                self.estimator = match value {
                    "k1" => Estimator::K1,
                    "clip" => Estimator::Clip,
                    "abs" => Estimator::Abs,
                    "k3" => Estimator::K3,
                    "forward" => Estimator::Forward,
                    _ => return Err(bad(key, value, "expected k1|clip|abs|k3|forward")),
                }
            }
            "beta" => self.beta = parse(key, value)?,
            "thought_prob" => self.thought_prob = parse(key, value)?,
            "format_penalty" => self.format_penalty = parse(key, value)?,
            "advantage_side_kl" => self.advantage_side_kl = parse(key, value)?,
            "sft_init" => self.sft_init = parse(key, value)?,
            "sft_init_hands" => self.sft_init_hands = parse(key, value)?,
            "sft_init_steps" => self.sft_init_steps = parse(key, value)?,
            "sft_batch_size" => self.sft_batch_size = parse(key, value)?,
            "emit_svg" => self.emit_svg = parse(key, value)?,
            _ => unreachable!("key list checked by caller"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::Invalid(msg.to_string()))
            }
        };
        check(self.buffer_size > 0, "buffer_size must be positive")?;
        check(self.eval_cadence > 0, "eval_cadence must be positive")?;
        check(self.eval_episodes > 0, "eval_episodes must be positive")?;
        check(
            (0.0..=1.0).contains(&self.discount),
            "discount must be in [0,1]",
        )?;
        check(
            (0.0..=1.0).contains(&self.gae_lambda),
            "gae_lambda must be in [0,1]",
        )?;
        check(self.clip > 0.0 && self.clip < 1.0, "clip must be in (0,1)")?;
        check(self.entropy_coef >= 0.0, "entropy_coef must be >= 0")?;
        check(self.value_coef >= 0.0, "value_coef must be >= 0")?;
        check(self.ppo_epochs > 0, "ppo_epochs must be positive")?;
        check(self.minibatch_size > 0, "minibatch_size must be positive")?;
        check(self.grad_accum > 0, "grad_accum must be positive")?;
        check(
            self.lr_initial > 0.0 && self.lr_final > 0.0 && self.lr_final <= self.lr_initial,
            "lr schedule must satisfy 0 < lr_final <= lr_initial",
        )?;
        check(self.lr_steps > 0, "lr_steps must be positive")?;
        check(self.temperature > 0.0, "temperature must be positive")?;
        check(
            self.repetition_penalty >= 1.0,
            "repetition_penalty must be >= 1",
        )?;
        check(
            self.teacher_retry_coef > 1.0,
            "teacher_retry_coef must be > 1",
        )?;
        check(
            self.teacher_max_temperature >= self.temperature,
            "teacher_max_temperature must be >= temperature",
        )?;
        check(self.embed_dim > 0, "embed_dim must be positive")?;
        check(self.hidden_dim > 0, "hidden_dim must be positive")?;
        check(self.context_window > 0, "context_window must be positive")?;
        check(self.max_thought_len > 0, "max_thought_len must be positive")?;
        check(
            self.ties_density > 0.0 && self.ties_density <= 1.0,
            "ties_density must be in (0,1]",
        )?;
        check(
            self.alpha > 0.0 && self.alpha < 1.0,
            "alpha must be in (0,1)",
        )?;
        check(self.beta >= 0.0, "beta must be >= 0")?;
        check(
            (0.0..=1.0).contains(&self.thought_prob),
            "thought_prob must be in [0,1]",
        )?;
        check(self.sft_batch_size > 0, "sft_batch_size must be positive")?;
        check(!self.out_dir.is_empty(), "out_dir must be nonempty")?;
        Ok(())
    }

    /// Copy of this config with one key overridden, re-validated.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self, ConfigError> {
        if !KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey(key.into()));
        }
        let mut cfg = self.clone();
        cfg.set(key, value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn epochs(&self) -> usize {
        self.env_steps / self.buffer_size
    }

    pub fn policy_spec(&self) -> PolicySpec {
        PolicySpec {
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            context_window: self.context_window,
            max_thought_len: self.max_thought_len,
            obs_dim: crate::env::OBS_DIM,
        }
    }

    pub fn merge_config(&self) -> MergeConfig {
        MergeConfig {
            method: self.merge_method,
            density_k: self.ties_density,
            weighting: self.weighting,
            alpha: self.alpha,
            ema_mode: self.ema_mode,
        }
    }

    pub fn guidance_config(&self) -> GuidanceConfig {
        GuidanceConfig {
            variant: self.variant,
            scope: self.scope,
            estimator: self.estimator,
            beta: self.beta,
            thought_prob: self.thought_prob,
            format_penalty: self.format_penalty,
        }
    }

    pub fn ppo_config(&self) -> PpoConfig {
        PpoConfig {
            clip: self.clip,
            entropy_coef: self.entropy_coef,
            value_coef: self.value_coef,
            epochs: self.ppo_epochs,
            minibatch_size: self.minibatch_size,
            grad_accum: self.grad_accum,
            gamma: self.discount,
            lam: self.gae_lambda,
            scope: match self.scope {
                GuidanceScope::Thought => TokenScope::ActionOnly,
                GuidanceScope::Full => TokenScope::Full,
            },
        }
    }

    pub fn retry_temperatures(&self) -> Vec<f64> {
        crate::guidance::retry_temperatures_with(
            self.temperature,
            self.teacher_retry_coef,
            self.teacher_max_temperature,
        )
    }
}
