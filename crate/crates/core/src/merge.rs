//! Checkpoint merging: linear or TIES (trim, elect sign, selective average)
//! under simple or exponential moving-average weighting.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointBuffer, CheckpointError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeMethod {
    Linear,
    Ties,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    Sma,
    Ema,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmaMode {
    Recursive,
    ClosedForm,
}

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("empty checkpoint buffer")]
    EmptyBuffer,
    #[error("invalid merge config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

#[derive(Debug, Clone, Copy)]
pub struct MergeConfig {
    pub method: MergeMethod,
    /// TIES keep-ratio over all delta entries, in (0, 1].
    pub density_k: f64,
    pub weighting: Weighting,
    /// EMA smoothing factor, in (0, 1). Ignored under SMA.
    pub alpha: f64,
    /// Ignored unless weighting is EMA.
    pub ema_mode: EmaMode,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            method: MergeMethod::Ties,
            density_k: 0.8,
            weighting: Weighting::Sma,
            alpha: 0.5,
            ema_mode: EmaMode::ClosedForm,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<(), MergeError> {
        if !(self.density_k > 0.0 && self.density_k <= 1.0) {
            return Err(MergeError::InvalidConfig(format!(
                "density_k {} not in (0, 1]",
                self.density_k
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(MergeError::InvalidConfig(format!(
                "alpha {} not in (0, 1)",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Per-name tensors of values in {-1, 0, +1}; 0 excludes the entry.
#[derive(Debug, Clone)]
pub struct SignVector {
    pub signs: BTreeMap<String, Vec<i8>>,
}

/// Normalized merge weights for `n` history checkpoints, oldest first.
///
/// SMA is uniform. EMA unrolls the recursion `m_j = alpha * c_j + (1 - alpha) * m_(j-1)`
/// with `m_1 = c_1`, so the first entry absorbs the `(1 - alpha)^(n-1)` tail mass.
pub fn compute_weights(n: usize, config: &MergeConfig) -> Result<Vec<f64>, MergeError> {
    if n == 0 {
        return Err(MergeError::EmptyBuffer);
    }
    config.validate()?;
    let mut w = match config.weighting {
        Weighting::Sma => vec![1.0 / n as f64; n],
        Weighting::Ema => {
            let a = config.alpha;
            let mut w = vec![0.0; n];
            w[0] = (1.0 - a).powi(n as i32 - 1);
            for (i, wi) in w.iter_mut().enumerate().skip(1) {
                *wi = a * (1.0 - a).powi((n - 1 - i) as i32);
            }
            w
        }
    };
    let sum: f64 = w.iter().sum();
    for wi in &mut w {
        *wi /= sum;
    }
    Ok(w)
}

/// Keep exactly `ceil(density_k * total)` entries of the delta, chosen by
/// magnitude across all tensors jointly; ties at the threshold keep the
/// earlier entry in (name, flat index) order.
pub fn trim(delta: &Checkpoint, density_k: f64) -> Result<Checkpoint, MergeError> {
    if !(density_k > 0.0 && density_k <= 1.0) {
        return Err(MergeError::InvalidConfig(format!(
            "density_k {density_k} not in (0, 1]"
        )));
    }
    let total = delta.num_values();
    if total == 0 {
        return Ok(delta.clone());
    }
    let keep = (density_k * total as f64).ceil() as usize;
    let keep = keep.min(total).max(1);

    let mut ranked: Vec<(f32, usize, usize)> = Vec::with_capacity(total);
    for (name_idx, (_, t)) in delta.iter().enumerate() {
        for (flat, v) in t.data().iter().enumerate() {
            ranked.push((v.abs(), name_idx, flat));
        }
    }
    ranked.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut kept: Vec<Vec<bool>> = delta.iter().map(|(_, t)| vec![false; t.len()]).collect();
    for &(_, name_idx, flat) in ranked.iter().take(keep) {
        kept[name_idx][flat] = true;
    }

    let mut out = Checkpoint::new(delta.step_id, delta.tag.clone());
    for (name_idx, (name, t)) in delta.iter().enumerate() {
        let data: Vec<f32> = t
            .data()
            .iter()
            .enumerate()
            .map(|(flat, &v)| if kept[name_idx][flat] { v } else { 0.0 })
            .collect();
        out.insert(name.clone(), Tensor::new(t.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

/// Majority vote by weighted total magnitude of positive vs negative values.
pub fn elect_signs(deltas: &[Checkpoint], weights: &[f64]) -> Result<SignVector, MergeError> {
    let first = deltas.first().ok_or(MergeError::EmptyBuffer)?;
    let mut signs = BTreeMap::new();
    for (name, t) in first.iter() {
        let mut entry = vec![0i8; t.len()];
        for (flat, slot) in entry.iter_mut().enumerate() {
            let mut pos = 0.0f64;
            let mut neg = 0.0f64;
            for (d, &w) in deltas.iter().zip(weights) {
                let v = d.get(name).expect("compatible deltas").data()[flat] as f64;
                if v > 0.0 {
                    pos += w * v;
                } else {
                    neg += w * (-v);
                }
            }
            *slot = if pos > neg {
                1
            } else if neg > pos {
                -1
            } else {
                0
            };
        }
        signs.insert(name.clone(), entry);
    }
    Ok(SignVector { signs })
}

/// Weighted mean over entries whose sign matches the elected sign;
/// zero where the elected sign is 0 or no contributor matches.
pub fn selective_average(
    deltas: &[Checkpoint],
    weights: &[f64],
    signs: &SignVector,
) -> Result<Checkpoint, MergeError> {
    let first = deltas.first().ok_or(MergeError::EmptyBuffer)?;
    let mut out = Checkpoint::new(first.step_id, "selective-average");
    for (name, t) in first.iter() {
        let sign_row = &signs.signs[name];
        let mut data = vec![0.0f32; t.len()];
        for (flat, slot) in data.iter_mut().enumerate() {
            let elected = sign_row[flat];
            if elected == 0 {
                continue;
            }
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for (d, &w) in deltas.iter().zip(weights) {
                let v = d.get(name).expect("compatible deltas").data()[flat] as f64;
                let s: i8 = if v > 0.0 {
                    1
                } else if v < 0.0 {
                    -1
                } else {
                    0
                };
                if s == elected {
                    num += w * v;
                    den += w;
                }
            }
            if den > 0.0 {
                *slot = (num / den) as f32;
            }
        }
        out.insert(name.clone(), Tensor::new(t.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

/// Merge the buffer into a single checkpoint (step id = max history step,
/// tag "merged"). Deltas are taken against the first buffer entry.
///
/// Weighted sums accumulate contributions per entry in f64, sorted by value
/// bits, so the result is bit-identical under permutation of equal-weight
/// inputs.
pub fn merge(buffer: &CheckpointBuffer, config: &MergeConfig) -> Result<Checkpoint, MergeError> {
    config.validate()?;
    if buffer.is_empty() {
        return Err(MergeError::EmptyBuffer);
    }
    let base = buffer.base();
    let history = buffer.history();
    let n = history.len();
    let weights = compute_weights(n, config)?;

    // Literal EMA recursion over full checkpoints; exists so the recursive
    // form of the weighting can be exercised end to end.
    if config.method == MergeMethod::Linear
        && config.weighting == Weighting::Ema
        && config.ema_mode == EmaMode::Recursive
    {
        // Iterate the recursion in f64 and cast once at the end, so merging
        // identical checkpoints reproduces them bitwise.
        let mut acc: BTreeMap<String, Vec<f64>> = history[0]
            .iter()
            .map(|(name, t)| (name.clone(), t.data().iter().map(|&v| v as f64).collect()))
            .collect();
        for c in &history[1..] {
            for (name, m) in acc.iter_mut() {
                let t = c
                    .get(name)
                    .ok_or_else(|| CheckpointError::Incompatible(name.clone()))?;
                for (mi, &v) in m.iter_mut().zip(t.data()) {
                    *mi = (1.0 - config.alpha) * *mi + config.alpha * v as f64;
                }
            }
        }
        let mut merged = Checkpoint::new(history.last().unwrap().step_id, "merged");
        for (name, m) in acc {
            let shape = history[0].get(&name).expect("seeded from history").shape().to_vec();
            let data: Vec<f32> = m.iter().map(|&v| v as f32).collect();
            merged.insert(name, Tensor::new(shape, data)?)?;
        }
        return Ok(merged);
    }

    let deltas: Vec<Checkpoint> = match config.method {
        MergeMethod::Linear => history
            .iter()
            .map(|c| c.delta(base))
            .collect::<Result<_, _>>()?,
        MergeMethod::Ties => history
            .iter()
            .map(|c| trim(&c.delta(base)?, config.density_k))
            .collect::<Result<_, _>>()?,
    };

    let combined = match config.method {
        MergeMethod::Linear => weighted_sum(&deltas, &weights)?,
        MergeMethod::Ties => {
            let signs = elect_signs(&deltas, &weights)?;
            selective_average(&deltas, &weights, &signs)?
        }
    };

    let mut out = base.add(&combined)?;
    out.step_id = history.last().unwrap().step_id;
    out.tag = "merged".into();
    // TIES exclusion: entries with elected sign 0 must equal the base exactly.
    // Holds by construction since the combined delta is 0 there.
    Ok(out)
}

fn weighted_sum(deltas: &[Checkpoint], weights: &[f64]) -> Result<Checkpoint, MergeError> {
    let first = deltas.first().ok_or(MergeError::EmptyBuffer)?;
    let mut out = Checkpoint::new(first.step_id, "weighted-sum");
    for (name, t) in first.iter() {
        let mut data = vec![0.0f32; t.len()];
        let mut contrib = vec![0.0f64; deltas.len()];
        for (flat, slot) in data.iter_mut().enumerate() {
            for (j, (d, &w)) in deltas.iter().zip(weights).enumerate() {
                contrib[j] = w * d.get(name).expect("compatible deltas").data()[flat] as f64;
            }
            contrib.sort_by(|a, b| a.total_cmp(b));
            *slot = contrib.iter().sum::<f64>() as f32;
        }
        out.insert(name.clone(), Tensor::new(t.shape().to_vec(), data)?)?;
    }
    Ok(out)
}
