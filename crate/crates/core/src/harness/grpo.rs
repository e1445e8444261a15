//! Group-relative policy optimisation on a toy task.
//!
//! For each prompt a group of G responses is sampled, each is scored with the
//! task's binary reward, and advantages are standardised within the group.
//! Groups where every reward is equal carry no signal and are skipped.

use serde::{Deserialize, Serialize};

use super::task::{rollout_stats, ToyEvaluator, ToyTask};
use crate::error::{Error, Result};
use crate::grad::{forward_row, GradTable};
use crate::objectives::{DynamicsRecord, Evaluator};
use crate::policy::{rollout_with_rng, NGramPolicy, Rollout, SamplerConfig, Token, TokenDist};
use crate::rng::{child_rng, derive_seed};

/// How a rollout's token log-probabilities are aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthNorm {
    #[default]
    SequenceSum,
    TokenMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    /// Prompts per step.
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub temperature: f64,
    pub top_p: f64,
    pub max_len: usize,
    pub advantage_epsilon: f64,
    pub length_norm: LengthNorm,
    pub eval_every: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            batch: 32,
            steps: 200,
            lr: 0.5,
            temperature: 1.0,
            top_p: 0.95,
            max_len: 8,
            advantage_epsilon: 1e-8,
            length_norm: LengthNorm::SequenceSum,
            eval_every: 20,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be >= 2".into()));
        }
        if self.batch == 0 || self.steps == 0 || self.max_len == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch, steps, max_len and eval_every must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.advantage_epsilon.is_nan() || self.advantage_epsilon < 0.0 {
            return Err(Error::Config("advantage_epsilon must be non-negative".into()));
        }
        self.sampler(0).validate()
    }

    pub fn sampler(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            temperature: self.temperature,
            top_p: self.top_p,
            top_k: None,
            seed,
        }
    }
}

/// `(r - mean) / (std + eps)` with the population standard deviation, or
/// `None` when all rewards are identical.
pub fn group_advantages(rewards: &[f64], eps: f64) -> Option<Vec<f64>> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    if var == 0.0 {
        return None;
    }
    let scale = var.sqrt() + eps;
    Some(rewards.iter().map(|r| (r - mean) / scale).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoStepReport {
    pub mean_reward: f64,
    pub mean_entropy: f64,
    pub mean_len: f64,
    /// Groups with non-zero reward variance.
    pub groups_used: usize,
    pub grad_norm: f64,
}

/// Descent direction (negated policy gradient) for one set of scored groups.
fn group_gradient(
    student: &NGramPolicy,
    groups: &[Vec<Rollout>],
    advantages: &[Option<Vec<f64>>],
    norm: LengthNorm,
) -> GradTable {
    let mut grad = GradTable::zeros_like(student);
    let total: usize = groups.iter().map(Vec::len).sum();
    let tau = student.temperature();
    for (group, adv) in groups.iter().zip(advantages) {
        let Some(adv) = adv else { continue };
        for (r, &a) in group.iter().zip(adv) {
            let weight = match norm {
                LengthNorm::SequenceSum => a,
                LengthNorm::TokenMean => a / r.response.len().max(1) as f64,
            };
            for t in 0..r.response.len() {
                let ctx = student.context_index(&r.prompt, &r.response[..t]);
                let q = student.dist_at(ctx);
                let onehot = TokenDist::point_mass(q.len(), r.response[t]);
                // (q - e_y) / tau is the descent direction of log q(y)
                grad.add_row_scaled(ctx, &forward_row(&q, &onehot, tau), weight);
            }
        }
    }
    grad.scaled(1.0 / total.max(1) as f64)
}

/// One GRPO update. Group `i` of the batch draws its rollouts from the child
/// streams `(step_seed, i, j)`.
pub fn grpo_step(
    student: &mut NGramPolicy,
    task: &ToyTask,
    cfg: &GrpoConfig,
    prompts: &[Vec<Token>],
    step_seed: u64,
) -> Result<GrpoStepReport> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(Error::Config("grpo_step needs at least one prompt".into()));
    }
    let sampler = cfg.sampler(step_seed);
    let mut groups = Vec::with_capacity(prompts.len());
    for (i, prompt) in prompts.iter().enumerate() {
        let mut group = Vec::with_capacity(cfg.group_size);
        for j in 0..cfg.group_size {
            let mut rng = child_rng(step_seed, &[i as u64, j as u64]);
            group.push(rollout_with_rng(student, prompt, cfg.max_len, &sampler, &mut rng)?);
        }
        groups.push(group);
    }
    let advantages: Vec<Option<Vec<f64>>> = groups
        .iter()
        .map(|g| {
            let rewards: Vec<f64> = g.iter().map(|r| task.reward(&r.prompt, &r.response)).collect();
            group_advantages(&rewards, cfg.advantage_epsilon)
        })
        .collect();
    let grad = group_gradient(student, &groups, &advantages, cfg.length_norm);
    grad.apply_descent(student, cfg.lr);

    let flat: Vec<Rollout> = groups.into_iter().flatten().collect();
    let stats = rollout_stats(task, &flat);
    Ok(GrpoStepReport {
        mean_reward: stats.accuracy,
        mean_entropy: stats.mean_entropy,
        mean_len: stats.mean_len,
        groups_used: advantages.iter().filter(|a| a.is_some()).count(),
        grad_norm: grad.norm(),
    })
}

/// Runs `cfg.steps` GRPO steps on prompts drawn from `train_prompts`,
/// recording held-out diagnostics every `cfg.eval_every` steps. The record
/// value is the step's mean training reward.
pub fn run_grpo(
    student: &mut NGramPolicy,
    task: &ToyTask,
    cfg: &GrpoConfig,
    train_prompts: &[Vec<Token>],
    evaluator: &ToyEvaluator,
    seed: u64,
) -> Result<Vec<DynamicsRecord>> {
    cfg.validate()?;
    if train_prompts.is_empty() {
        return Err(Error::Config("run_grpo needs training prompts".into()));
    }
    let mut records = Vec::new();
    for step in 1..=cfg.steps {
        let mut rng = child_rng(seed, &[0, step as u64]);
        let batch: Vec<Vec<Token>> = (0..cfg.batch)
            .map(|_| train_prompts[rand::Rng::gen_range(&mut rng, 0..train_prompts.len())].clone())
            .collect();
        let report = grpo_step(student, task, cfg, &batch, derive_seed(seed, &[1, step as u64]))?;
        if step % cfg.eval_every == 0 {
            records.push(evaluator.evaluate(student, step, report.mean_reward)?);
        }
    }
    Ok(records)
}
