//! Multi-turn PPO on the Points24 card game with a tiny thought-and-action
//! policy, guided by a teacher built from merged training checkpoints.

pub mod checkpoint;
pub mod config;
pub mod env;
pub mod guidance;
pub mod merge;
pub mod metrics;
pub mod policy;
pub mod ppo;
pub mod tensor;
pub mod tokens;
pub mod trainer;
