//! Group-relative advantages and the clipped, KL-regularized surrogate,
//! with analytic gradients with respect to the current policy's token
//! log-probabilities.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub n_rollouts: usize,
    pub eps_low: f64,
    pub eps_high: f64,
    pub beta: f64,
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            n_rollouts: 5,
            eps_low: 0.2,
            eps_high: 0.28,
            beta: 0.001,
            temperature: 1.0,
            top_p: 0.99,
        }
    }
}

/// Rollouts sampled for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub rewards: Vec<f64>,
    pub token_logps_new: Vec<Vec<f64>>,
    pub token_logps_old: Vec<Vec<f64>>,
    pub token_logps_ref: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GrpoError {
    #[error("empty reward group")]
    EmptyGroup,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
}

pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>, GrpoError> {
    if rewards.is_empty() {
        return Err(GrpoError::EmptyGroup);
    }
    // Offsetting by the first reward keeps identical groups exactly zero.
    let pivot = rewards[0];
    let mean = pivot + rewards.iter().map(|r| r - pivot).sum::<f64>() / rewards.len() as f64;
    Ok(rewards.iter().map(|r| r - mean).collect())
}

fn clip_ratio(ratio: f64, cfg: &GrpoConfig) -> f64 {
    ratio.clamp(1.0 - cfg.eps_low, 1.0 + cfg.eps_high)
}

/// `min(ρA, clip(ρ, 1-eps_low, 1+eps_high)·A)` with `ρ = exp(new - old)`.
pub fn clipped_token_objective(logp_new: f64, logp_old: f64, advantage: f64, cfg: &GrpoConfig) -> f64 {
    let ratio = (logp_new - logp_old).exp();
    (ratio * advantage).min(clip_ratio(ratio, cfg) * advantage)
}

/// Derivative of [`clipped_token_objective`] in `logp_new`: `ρA` on the
/// unclipped branch, zero where the clip binds.
pub fn clipped_token_gradient(logp_new: f64, logp_old: f64, advantage: f64, cfg: &GrpoConfig) -> f64 {
    let ratio = (logp_new - logp_old).exp();
    if ratio * advantage <= clip_ratio(ratio, cfg) * advantage {
        ratio * advantage
    } else {
        0.0
    }
}

/// k3 estimator `exp(δ) - δ - 1` with `δ = ref - new`.
pub fn kl_penalty(logp_new: f64, logp_ref: f64) -> f64 {
    let delta = logp_ref - logp_new;
    delta.exp() - delta - 1.0
}

pub fn kl_gradient(logp_new: f64, logp_ref: f64) -> f64 {
    1.0 - (logp_ref - logp_new).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchObjective {
    pub objective: f64,
    pub advantages: Vec<f64>,
    /// Same shape as `token_logps_new`.
    pub gradient: Vec<Vec<f64>>,
}

fn check_lengths(group: &RolloutGroup) -> Result<(), GrpoError> {
    let n = group.rewards.len();
    for (name, arr) in [
        ("new", &group.token_logps_new),
        ("old", &group.token_logps_old),
        ("ref", &group.token_logps_ref),
    ] {
        if arr.len() != n {
            return Err(GrpoError::LengthMismatch(format!(
                "{} rewards but {} {name} trajectories",
                n,
                arr.len()
            )));
        }
    }
    for i in 0..n {
        let len = group.token_logps_new[i].len();
        if group.token_logps_old[i].len() != len || group.token_logps_ref[i].len() != len {
            return Err(GrpoError::LengthMismatch(format!(
                "trajectory {i}: new/old/ref token counts {}/{}/{}",
                len,
                group.token_logps_old[i].len(),
                group.token_logps_ref[i].len()
            )));
        }
    }
    Ok(())
}

/// Token-mean surrogate minus `beta` times the token-mean KL over the whole
/// group, and its gradient in every `logp_new` entry.
pub fn grpo_batch_objective(group: &RolloutGroup, cfg: &GrpoConfig) -> Result<BatchObjective, GrpoError> {
    check_lengths(group)?;
    let advantages = group_advantages(&group.rewards)?;
    objective_with_advantages(group, advantages, cfg)
}

/// As [`grpo_batch_objective`] but with caller-supplied per-trajectory
/// advantages in place of the centered rewards.
pub fn objective_with_advantages(
    group: &RolloutGroup,
    advantages: Vec<f64>,
    cfg: &GrpoConfig,
) -> Result<BatchObjective, GrpoError> {
    check_lengths(group)?;
    if advantages.len() != group.rewards.len() {
        return Err(GrpoError::LengthMismatch(format!(
            "{} advantages for {} trajectories",
            advantages.len(),
            group.rewards.len()
        )));
    }
    let tokens: usize = group.token_logps_new.iter().map(Vec::len).sum();
    let scale = if tokens == 0 { 0.0 } else { 1.0 / tokens as f64 };
    let mut objective = 0.0;
    let mut gradient = Vec::with_capacity(advantages.len());
    for (i, a) in advantages.iter().enumerate() {
        let new = &group.token_logps_new[i];
        let old = &group.token_logps_old[i];
        let rf = &group.token_logps_ref[i];
        let mut g = Vec::with_capacity(new.len());
        for t in 0..new.len() {
            objective += clipped_token_objective(new[t], old[t], *a, cfg) - cfg.beta * kl_penalty(new[t], rf[t]);
            g.push(
                scale
                    * (clipped_token_gradient(new[t], old[t], *a, cfg)
                        - cfg.beta * kl_gradient(new[t], rf[t])),
            );
        }
        gradient.push(g);
    }
    Ok(BatchObjective {
        objective: objective * scale,
        advantages,
        gradient,
    })
}
