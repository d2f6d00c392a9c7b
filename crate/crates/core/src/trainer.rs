//! End-to-end training orchestration: SFT initialization, per-epoch teacher
//! merging, rollout collection, guidance, PPO updates, evaluation, metrics,
//! and checkpoint persistence. Deterministic given a seed: every epoch draws
//! from RNG streams derived only from (seed, epoch), so resumed runs replay
//! the unbroken run exactly.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointBuffer, CheckpointError};
use crate::config::{ConfigError, TrainConfig};
use crate::env::{self, Points24Env};
use crate::guidance::{
    self, estimate, format_reward, revkl, shape_reward, GuidanceConfig, SftPair, ThoughtDataset,
    Variant,
};
use crate::merge::{merge, MergeConfig, MergeError};
use crate::metrics::{EpochMetrics, RunMetrics};
use crate::policy::{CosineSgd, Gradients, Policy, PolicyError, SampleConfig};
use crate::ppo::{self, RolloutBuffer, Transition};
use crate::tokens::Token;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("environment error: {0}")]
    Env(#[from] env::EnvError),
    #[error("evaluation needs at least one episode")]
    ZeroEpisodes,
    #[error("non-finite training state at epoch {epoch}; last good checkpoint: {last_good}")]
    NonFinite { epoch: usize, last_good: String },
    #[error("missing checkpoint for epoch {0}")]
    MissingCheckpoint(usize),
    #[error("corrupt run state: {0}")]
    CorruptState(String),
}

// Stream separators for per-epoch RNG derivation.
const DOMAIN_INIT: u64 = 1;
const DOMAIN_SFT_INIT: u64 = 2;
const DOMAIN_EPOCH: u64 = 3;
const DOMAIN_EVAL: u64 = 4;

fn derived_rng(seed: u64, domain: u64, epoch: u64) -> ChaCha8Rng {
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(domain.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(epoch.wrapping_mul(0x2545_F491_4F6C_DD1D));
    ChaCha8Rng::seed_from_u64(mixed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub success_rate: f64,
    pub mean_return: f64,
}

/// Greedy evaluation over a fixed seeded hand sequence.
pub fn evaluate(
    policy: &Policy,
    episodes: usize,
    seed: u64,
    repetition_penalty: f64,
) -> Result<EvalResult, TrainerError> {
    if episodes == 0 {
        return Err(TrainerError::ZeroEpisodes);
    }
    let env = Points24Env::default();
    let mut rng = derived_rng(seed, DOMAIN_EVAL, 0);
    let gen = SampleConfig {
        temperature: 1e-6,
        repetition_penalty,
    };
    let mut successes = 0usize;
    let mut total_return = 0.0;
    for _ in 0..episodes {
        let mut state = env.reset(&mut rng);
        let mut success = false;
        loop {
            let obs = state.features();
            let resp = policy.sample_response(&obs, &state.formula, gen, &mut rng);
            let outcome = match resp.action {
                Some(a) => env.step(&state, a)?,
                None => env.step_without_action(&state)?,
            };
            total_return += outcome.reward;
            success |= outcome.info.success;
            state = outcome.next_state;
            if outcome.done {
                break;
            }
        }
        successes += success as usize;
    }
    Ok(EvalResult {
        success_rate: successes as f64 / episodes as f64,
        mean_return: total_return / episodes as f64,
    })
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_policy: Policy,
    pub metrics: RunMetrics,
    pub out_dir: PathBuf,
    pub completed_epochs: usize,
}

fn ckpt_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("ckpt_{epoch:04}.gtck"))
}

fn load_epoch_checkpoint(dir: &Path, epoch: usize) -> Result<Checkpoint, TrainerError> {
    let path = ckpt_path(dir, epoch);
    if !path.exists() {
        return Err(TrainerError::MissingCheckpoint(epoch));
    }
    let mut c = Checkpoint::load(path)?;
    c.step_id = epoch as u64;
    c.tag = format!("epoch{epoch}");
    Ok(c)
}

fn serialize_pair(pair: &SftPair) -> String {
    let bits: String = pair
        .obs
        .iter()
        .map(|&v| if v != 0.0 { '1' } else { '0' })
        .collect();
    let toks = |ts: &[Token]| {
        ts.iter()
            .map(|t| t.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    };
    let action = pair.action.map(|a| a.as_str().to_string()).unwrap_or_default();
    format!("{bits}|{}|{}|{action}", toks(&pair.formula), toks(&pair.thought))
}

fn deserialize_pair(line: &str) -> Result<SftPair, TrainerError> {
    let parts: Vec<&str> = line.split('|').collect();
    if parts.len() != 4 {
        return Err(TrainerError::CorruptState(format!(
            "thought line has {} fields",
            parts.len()
        )));
    }
    let obs: Vec<f32> = parts[0]
        .chars()
        .map(|c| if c == '1' { 1.0 } else { 0.0 })
        .collect();
    if obs.len() != env::OBS_DIM {
        return Err(TrainerError::CorruptState("bad obs bits".into()));
    }
    let toks = |s: &str| -> Result<Vec<Token>, TrainerError> {
        s.split_whitespace()
            .map(|t| {
                Token::from_str(t)
                    .ok_or_else(|| TrainerError::CorruptState(format!("unknown token {t:?}")))
            })
            .collect()
    };
    let action = if parts[3].is_empty() {
        None
    } else {
        Some(
            Token::from_str(parts[3])
                .ok_or_else(|| TrainerError::CorruptState("bad action token".into()))?,
        )
    };
    Ok(SftPair {
        obs,
        formula: toks(parts[1])?,
        thought: toks(parts[2])?,
        action,
    })
}

fn save_thoughts(dir: &Path, ds: &ThoughtDataset) -> std::io::Result<()> {
    let body: String = ds
        .pairs()
        .iter()
        .map(|p| serialize_pair(p) + "\n")
        .collect();
    std::fs::write(dir.join("thoughts.txt"), body)
}

fn load_thoughts(dir: &Path) -> Result<ThoughtDataset, TrainerError> {
    let mut ds = ThoughtDataset::default();
    let path = dir.join("thoughts.txt");
    if path.exists() {
        for line in std::fs::read_to_string(path)?.lines() {
            if !line.is_empty() {
                ds.push(deserialize_pair(line)?);
            }
        }
    }
    Ok(ds)
}

/// Imitation pretraining on solver witness labels.
fn sft_initialize(policy: &mut Policy, cfg: &TrainConfig) -> Result<(), TrainerError> {
    let mut rng = derived_rng(cfg.seed, DOMAIN_SFT_INIT, 0);
    let records = env::make_sft_dataset(cfg.sft_init_hands, &mut rng);
    if records.is_empty() {
        return Ok(());
    }
    let pairs: Vec<SftPair> = records
        .iter()
        .map(|r| SftPair {
            obs: r.features.clone(),
            formula: r.formula.clone(),
            thought: r.thought.clone(),
            action: Some(r.action),
        })
        .collect();
    let sgd = CosineSgd {
        initial_lr: 0.08,
        final_lr: 0.005,
        max_steps: cfg.sft_init_steps,
    };
    for step in 0..cfg.sft_init_steps {
        let batch: Vec<&SftPair> = (0..cfg.sft_batch_size)
            .map(|_| &pairs[rng.gen_range(0..pairs.len())])
            .collect();
        let mut grads = Gradients::zeros(policy);
        // Train the full structured response so the format itself is learned.
        guidance::sft_loss_grad(policy, &batch, cfg.scope, true, &mut grads);
        sgd.apply(policy, &grads, step)?;
    }
    Ok(())
}

struct EpochRollout {
    buffer: RolloutBuffer,
    kl_estimates: Vec<Option<f64>>,
    episodes: usize,
    successes: usize,
    env_return: f64,
    illegal_steps: usize,
    thought_tokens: usize,
    revkl_sum: f64,
    revkl_count: usize,
}

#[allow(clippy::too_many_arguments)]
fn collect_rollout(
    policy: &Policy,
    teacher: &Policy,
    cfg: &TrainConfig,
    gcfg: &GuidanceConfig,
    temps: &[f64],
    thoughts: &mut ThoughtDataset,
    rng: &mut ChaCha8Rng,
) -> Result<EpochRollout, TrainerError> {
    let env = Points24Env::default();
    let gen = SampleConfig {
        temperature: cfg.temperature,
        repetition_penalty: cfg.repetition_penalty,
    };
    let mut out = EpochRollout {
        buffer: RolloutBuffer::default(),
        kl_estimates: Vec::new(),
        episodes: 0,
        successes: 0,
        env_return: 0.0,
        illegal_steps: 0,
        thought_tokens: 0,
        revkl_sum: 0.0,
        revkl_count: 0,
    };
    while out.buffer.len() < cfg.buffer_size {
        let mut state = env.reset(rng);
        let mut success = false;
        loop {
            let obs = state.features();
            let resp = policy.sample_response(&obs, &state.formula, gen, rng);
            let outcome = match resp.action {
                Some(a) => env.step(&state, a)?,
                None => env.step_without_action(&state)?,
            };
            out.illegal_steps += !outcome.info.legal as usize;
            out.thought_tokens += resp.thought.len();
            out.env_return += outcome.reward;
            success |= outcome.info.success;

            let mut shaped = outcome.reward + format_reward(&resp, gcfg.format_penalty);
            let mut kl_est = None;
            match gcfg.variant {
                Variant::Kl => {
                    if gcfg.thought_prob > 0.0 && rng.gen_bool(gcfg.thought_prob) {
                        let kl = revkl(policy, teacher, &obs, &state.formula, &resp, gcfg.scope);
                        if !kl.empty {
                            let est = estimate(&kl, gcfg.estimator);
                            out.revkl_sum += kl.mean;
                            out.revkl_count += 1;
                            if cfg.advantage_side_kl {
                                kl_est = Some(est);
                            } else {
                                shaped = shape_reward(shaped, est, gcfg.beta);
                            }
                        }
                    }
                }
                Variant::Sft => {
                    if let Some(pair) = guidance::teacher_reference_with(
                        teacher,
                        &obs,
                        &state.formula,
                        gcfg,
                        temps,
                        rng,
                    ) {
                        thoughts.push(pair);
                    }
                }
            }

            let value = policy.state_value(&obs, &state.formula);
            let done = outcome.done;
            out.buffer.push(Transition {
                obs,
                formula: state.formula.clone(),
                response: resp,
                reward: shaped,
                value,
                done,
            });
            out.kl_estimates.push(kl_est);
            state = outcome.next_state;
            if done {
                break;
            }
        }
        out.episodes += 1;
        out.successes += success as usize;
    }
    Ok(out)
}

/// Run Algorithm 1 (SFT variant) or Algorithm 2 (KL variant) to completion,
/// resuming from persisted per-epoch state in `out_dir` when present.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome, TrainerError> {
    cfg.validate()?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;

    let total_epochs = cfg.epochs();
    let merge_cfg: MergeConfig = cfg.merge_config();
    let gcfg = cfg.guidance_config();
    gcfg.validate().map_err(ConfigError::Invalid)?;
    let ppo_cfg = cfg.ppo_config();
    let temps = cfg.retry_temperatures();
    let sgd = CosineSgd {
        initial_lr: cfg.lr_initial,
        final_lr: cfg.lr_final,
        max_steps: cfg.lr_steps,
    };

    // Resume if a metrics file and matching checkpoints exist.
    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = RunMetrics::default();
    let mut start_epoch = 1usize;
    if metrics_path.exists() {
        metrics = RunMetrics::from_csv(&std::fs::read_to_string(&metrics_path)?)
            .map_err(TrainerError::CorruptState)?;
        start_epoch = metrics.rows.last().map(|r| r.epoch + 1).unwrap_or(1);
    }

    let mut policy;
    let mut ckpts;
    if start_epoch == 1 {
        let mut init_rng = derived_rng(cfg.seed, DOMAIN_INIT, 0);
        policy = Policy::init(cfg.policy_spec(), &mut init_rng);
        if cfg.sft_init {
            sft_initialize(&mut policy, cfg)?;
        }
        let c0 = policy.to_checkpoint(0, "epoch0");
        c0.save(ckpt_path(&out_dir, 0))?;
        ckpts = CheckpointBuffer::new(c0);
    } else {
        // Reload the whole checkpoint history 0..start_epoch-1.
        // The on-disk format stores only tensors; restore ids from filenames.
        let base = load_epoch_checkpoint(&out_dir, 0)?;
        ckpts = CheckpointBuffer::new(base);
        for k in 1..start_epoch {
            ckpts.push(load_epoch_checkpoint(&out_dir, k)?)?;
        }
        policy = Policy::from_checkpoint(ckpts.history().last().unwrap())?;
    }

    let mut thoughts = if gcfg.variant == Variant::Sft {
        load_thoughts(&out_dir)?
    } else {
        ThoughtDataset::default()
    };

    let mut env_steps: usize = metrics.rows.last().map(|r| r.env_steps).unwrap_or(0);
    let mut last_eval = metrics
        .rows
        .last()
        .map(|r| EvalResult {
            success_rate: r.success_rate,
            mean_return: r.mean_return,
        })
        .unwrap_or(EvalResult {
            success_rate: 0.0,
            mean_return: 0.0,
        });

    for epoch in start_epoch..=total_epochs {
        let wall = Instant::now();
        let mut rng = derived_rng(cfg.seed, DOMAIN_EPOCH, epoch as u64);

        let merged = merge(&ckpts, &merge_cfg)?;
        let teacher = Policy::from_checkpoint(&merged)?;

        let mut rollout =
            collect_rollout(&policy, &teacher, cfg, &gcfg, &temps, &mut thoughts, &mut rng)?;
        env_steps += rollout.buffer.len();
        rollout.buffer.finalize(cfg.discount, cfg.gae_lambda);
        if cfg.advantage_side_kl {
            for (adv, est) in rollout
                .buffer
                .advantages
                .iter_mut()
                .zip(&rollout.kl_estimates)
            {
                if let Some(e) = est {
                    *adv -= gcfg.beta * e;
                }
            }
        }

        let lr_step = epoch - 1;
        let stats = ppo::update(&mut policy, &rollout.buffer, &ppo_cfg, &sgd, lr_step, &mut rng)
            .map_err(|_| TrainerError::NonFinite {
                epoch,
                last_good: ckpt_path(&out_dir, epoch - 1).display().to_string(),
            })?;

        let mut sft_loss_metric = 0.0;
        if gcfg.variant == Variant::Sft && !thoughts.is_empty() {
            let batch = thoughts.sample_batch(cfg.sft_batch_size, &mut rng);
            let mut grads = Gradients::zeros(&policy);
            sft_loss_metric =
                guidance::sft_loss_grad(&policy, &batch, gcfg.scope, false, &mut grads);
            sgd.apply(&mut policy, &grads, lr_step)
                .map_err(|_| TrainerError::NonFinite {
                    epoch,
                    last_good: ckpt_path(&out_dir, epoch - 1).display().to_string(),
                })?;
        }

        if policy.params().iter().any(|p| !p.is_finite()) {
            return Err(TrainerError::NonFinite {
                epoch,
                last_good: ckpt_path(&out_dir, epoch - 1).display().to_string(),
            });
        }

        if epoch % cfg.eval_cadence == 0 {
            last_eval = evaluate(&policy, cfg.eval_episodes, cfg.seed, cfg.repetition_penalty)?;
        }

        let n_steps = rollout.buffer.len() as f64;
        metrics.push(EpochMetrics {
            epoch,
            env_steps,
            success_rate: last_eval.success_rate,
            mean_return: last_eval.mean_return,
            mean_thought_len: rollout.thought_tokens as f64 / n_steps,
            illegal_rate: rollout.illegal_steps as f64 / n_steps,
            mean_revkl: if rollout.revkl_count > 0 {
                rollout.revkl_sum / rollout.revkl_count as f64
            } else {
                0.0
            },
            sft_loss: sft_loss_metric,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            clip_fraction: stats.clip_fraction,
            lr: sgd.lr(lr_step),
            wall_clock_secs: wall.elapsed().as_secs_f64(),
        });

        let ckpt = policy.to_checkpoint(epoch as u64, format!("epoch{epoch}"));
        ckpt.save(ckpt_path(&out_dir, epoch))?;
        ckpts.push(ckpt)?;
        metrics.write_csv(&metrics_path)?;
        metrics.write_timings(out_dir.join("timings.csv"))?;
        if cfg.emit_svg {
            metrics.write_svg(out_dir.join("metrics.svg"))?;
        }
        if gcfg.variant == Variant::Sft {
            save_thoughts(&out_dir, &thoughts)?;
        }
    }

    Ok(TrainOutcome {
        final_policy: policy,
        metrics,
        out_dir,
        completed_epochs: total_epochs,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct PairedEval {
    pub epoch: usize,
    pub current: EvalResult,
    pub merged: EvalResult,
}

/// Fig.-2-style comparison: for each epoch k >= 2, evaluate the epoch-k
/// checkpoint against the merge of all checkpoints before k, on the same
/// seeded hands.
pub fn merged_vs_current(
    run_dir: impl AsRef<Path>,
    merge_cfg: &MergeConfig,
    episodes: usize,
    seed: u64,
    repetition_penalty: f64,
) -> Result<Vec<PairedEval>, TrainerError> {
    let dir = run_dir.as_ref();
    let mut all = Vec::new();
    for k in 0.. {
        if !ckpt_path(dir, k).exists() {
            break;
        }
        all.push(load_epoch_checkpoint(dir, k)?);
    }
    if all.is_empty() {
        return Err(TrainerError::MissingCheckpoint(0));
    }
    let mut rows = Vec::new();
    for k in 2..all.len() {
        let mut buf = CheckpointBuffer::new(all[0].clone());
        for c in &all[1..k] {
            buf.push(c.clone())?;
        }
        let merged = Policy::from_checkpoint(&merge(&buf, merge_cfg)?)?;
        let current = Policy::from_checkpoint(&all[k])?;
        rows.push(PairedEval {
            epoch: k,
            current: evaluate(&current, episodes, seed, repetition_penalty)?,
            merged: evaluate(&merged, episodes, seed, repetition_penalty)?,
        });
    }
    Ok(rows)
}

/// One seeded run per sweep value of a single config key; results land in
/// per-cell subdirectories of the base out_dir.
pub fn ablate(
    base: &TrainConfig,
    key: &str,
    values: &[&str],
) -> Result<Vec<(String, TrainOutcome)>, TrainerError> {
    let mut out = Vec::new();
    for value in values {
        let mut cell = base.with_override(key, value)?;
        cell.out_dir = format!("{}/{}_{}", base.out_dir, key, value);
        out.push((format!("{key}={value}"), train(&cell)?));
    }
    Ok(out)
}
