use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use points24_rl::checkpoint::Checkpoint;
use points24_rl::config::TrainConfig;
use points24_rl::env::solve;
use points24_rl::policy::Policy;
use points24_rl::tokens::render;
use points24_rl::trainer;

#[derive(Parser)]
#[command(name = "p24rl", about = "Merged-teacher PPO training on Points24")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training configuration to completion (resumes if interrupted).
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the guidance variant (sft|kl).
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<String>,
    },
    /// Greedy evaluation of a checkpoint on seeded hands.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1.2)]
        repetition_penalty: f64,
    },
    /// Merge checkpoint files (first input is the delta base).
    Merge {
        /// Input checkpoint files in training order.
        #[arg(long, num_args = 2.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "ties")]
        method: String,
        #[arg(long, default_value_t = 0.8)]
        density: f64,
        #[arg(long, default_value = "sma")]
        weighting: String,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value = "closed_form")]
        ema_mode: String,
    },
    /// Brute-force solve a hand, e.g. --cards 2,3,4,6.
    Solve {
        #[arg(long)]
        cards: String,
    },
    /// Sweep one config key over several values, one seeded run per cell.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Sweep spec, e.g. estimator=k1,clip,k3 or alpha=0.1,0.5,0.9.
        #[arg(long)]
        sweep: String,
    },
    /// Paired merged-vs-current evaluation over a completed run directory.
    Fig2 {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_file(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(TrainConfig::default()),
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train {
            config,
            variant,
            seed,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(v) = variant {
                cfg = cfg.with_override("variant", &v)?;
            }
            if let Some(s) = seed {
                cfg = cfg.with_override("seed", &s.to_string())?;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let outcome = trainer::train(&cfg)?;
            let last = outcome.metrics.rows.last();
            println!(
                "completed {} epochs in {}; final success rate {}",
                outcome.completed_epochs,
                outcome.out_dir.display(),
                last.map(|r| format!("{:.3}", r.success_rate))
                    .unwrap_or_else(|| "n/a".into()),
            );
        }
        Command::Eval {
            checkpoint,
            episodes,
            seed,
            repetition_penalty,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let policy = Policy::from_checkpoint(&ckpt)?;
            let r = trainer::evaluate(&policy, episodes, seed, repetition_penalty)?;
            println!(
                "episodes {episodes}  success_rate {:.4}  mean_return {:.4}",
                r.success_rate, r.mean_return
            );
        }
        Command::Merge {
            inputs,
            out,
            method,
            density,
            weighting,
            alpha,
            ema_mode,
        } => {
            let cfg = TrainConfig::default()
                .with_override("merge_method", &method)?
                .with_override("ties_density", &density.to_string())?
                .with_override("weighting", &weighting)?
                .with_override("alpha", &alpha.to_string())?
                .with_override("ema_mode", &ema_mode)?
                .merge_config();
            let mut iter = inputs.iter();
            let first = iter.next().expect("clap enforces >= 2 inputs");
            let mut base = Checkpoint::load(first)
                .with_context(|| format!("loading {}", first.display()))?;
            base.step_id = 0;
            let mut buffer = points24_rl::checkpoint::CheckpointBuffer::new(base);
            for (i, path) in iter.enumerate() {
                let mut c = Checkpoint::load(path)
                    .with_context(|| format!("loading {}", path.display()))?;
                c.step_id = i as u64 + 1;
                buffer.push(c)?;
            }
            let merged = points24_rl::merge::merge(&buffer, &cfg)?;
            merged.save(&out)?;
            println!("merged {} checkpoints into {}", inputs.len(), out.display());
        }
        Command::Solve { cards } => {
            let parsed: Vec<u8> = cards
                .split(',')
                .map(|c| c.trim().parse::<u8>())
                .collect::<Result<_, _>>()
                .context("cards must be four comma-separated integers")?;
            let [a, b, c, d] = parsed[..] else {
                bail!("expected exactly four cards, got {}", parsed.len());
            };
            for card in [a, b, c, d] {
                if !(1..=10).contains(&card) {
                    bail!("card {card} out of range 1..=10");
                }
            }
            match solve([a, b, c, d]) {
                Some(witness) => println!("{}", render(&witness)),
                None => println!("unsolvable"),
            }
        }
        Command::Ablate { config, sweep } => {
            let base = load_config(&config)?;
            let (key, values) = sweep
                .split_once('=')
                .context("sweep spec must look like key=v1,v2,...")?;
            let values: Vec<&str> = values.split(',').map(str::trim).collect();
            let results = trainer::ablate(&base, key, &values)?;
            println!("cell,final_success_rate,final_mean_return");
            for (name, outcome) in &results {
                let last = outcome.metrics.rows.last();
                println!(
                    "{name},{:.4},{:.4}",
                    last.map(|r| r.success_rate).unwrap_or(0.0),
                    last.map(|r| r.mean_return).unwrap_or(0.0),
                );
            }
        }
        Command::Fig2 {
            run,
            config,
            episodes,
            seed,
        } => {
            let cfg = load_config(&config)?;
            let rows = trainer::merged_vs_current(
                &run,
                &cfg.merge_config(),
                episodes,
                seed,
                cfg.repetition_penalty,
            )?;
            let mut csv =
                String::from("epoch,current_sr,merged_sr,current_return,merged_return\n");
            for r in &rows {
                csv.push_str(&format!(
                    "{},{:.4},{:.4},{:.4},{:.4}\n",
                    r.epoch,
                    r.current.success_rate,
                    r.merged.success_rate,
                    r.current.mean_return,
                    r.merged.mean_return
                ));
            }
            print!("{csv}");
            std::fs::write(run.join("fig2.csv"), csv)?;
        }
    }
    Ok(())
}
