//! Group-relative policy optimisation math: group-normalized advantages, the
//! clipped surrogate and the per-token KL estimator.
//!
//! The search engine has no token log-probabilities. It only emits group
//! rewards and advantages; [`grpo_objective`] exists so an external trainer
//! can be checked against the same definitions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::SolutionId;

#[derive(Debug, Error, PartialEq)]
pub enum GrpoError {
    #[error("a group needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("policy ratio must be positive, got {0}")]
    NonPositiveRatio(f64),
    #[error("sequence {0} has no tokens")]
    EmptySequence(usize),
    #[error("objective needs at least one sequence")]
    EmptyGroup,
    #[error("invalid grpo config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrpoConfig {
    #[serde(default = "default_clip")]
    pub clip_epsilon: f64,
    #[serde(default = "default_kl")]
    pub kl_coeff: f64,
    #[serde(default = "default_group")]
    pub group_size: usize,
    #[serde(default = "default_floor")]
    pub degenerate_std_floor: f64,
}

fn default_clip() -> f64 {
    0.2
}
fn default_kl() -> f64 {
    1e-3
}
fn default_group() -> usize {
    16
}
fn default_floor() -> f64 {
    1e-8
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: default_clip(),
            kl_coeff: default_kl(),
            group_size: default_group(),
            degenerate_std_floor: default_floor(),
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(GrpoError::InvalidConfig("clip_epsilon must lie in (0, 1)"));
        }
        if !(self.kl_coeff >= 0.0) {
            return Err(GrpoError::InvalidConfig("kl_coeff must be non-negative"));
        }
        if self.group_size == 0 {
            return Err(GrpoError::InvalidConfig("group_size must be positive"));
        }
        if !(self.degenerate_std_floor > 0.0) {
            return Err(GrpoError::InvalidConfig("degenerate_std_floor must be positive"));
        }
        Ok(())
    }
}

/// One group of sibling rollouts sharing a prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRollout {
    pub prompt_key: SolutionId,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl GroupRollout {
    pub fn new(prompt_key: SolutionId, rewards: Vec<f64>, floor: f64) -> Result<Self, GrpoError> {
        let advantages = group_advantages(&rewards, floor)?;
        Ok(Self { prompt_key, rewards, advantages })
    }
}

/// Z-scores within the group using the population standard deviation.
/// Groups whose spread is at or below `floor` get all-zero advantages.
pub fn group_advantages(rewards: &[f64], floor: f64) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > floor) {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// `min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)`.
pub fn clipped_term(ratio: f64, advantage: f64, epsilon: f64) -> Result<f64, GrpoError> {
    if !(ratio > 0.0) {
        return Err(GrpoError::NonPositiveRatio(ratio));
    }
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    Ok((ratio * advantage).min(clipped * advantage))
}

/// `exp(d) - d - 1` with `d = logp_ref - logp_policy`; non-negative.
pub fn kl_penalty_term(logp_policy: f64, logp_ref: f64) -> f64 {
    let delta = logp_ref - logp_policy;
    delta.exp_m1() - delta
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub ratio: f64,
    pub advantage: f64,
    pub logp_policy: f64,
    pub logp_ref: f64,
}

/// Group-averaged, length-normalized clipped surrogate minus the KL penalty.
pub fn grpo_objective(sequences: &[Vec<TokenRecord>], config: &GrpoConfig) -> Result<f64, GrpoError> {
    if sequences.is_empty() {
        return Err(GrpoError::EmptyGroup);
    }
    let mut total = 0.0;
    for (j, seq) in sequences.iter().enumerate() {
        if seq.is_empty() {
            return Err(GrpoError::EmptySequence(j));
        }
        let mut seq_sum = 0.0;
        for tok in seq {
            seq_sum += clipped_term(tok.ratio, tok.advantage, config.clip_epsilon)?
                - config.kl_coeff * kl_penalty_term(tok.logp_policy, tok.logp_ref);
        }
        total += seq_sum / seq.len() as f64;
    }
    Ok(total / sequences.len() as f64)
}
