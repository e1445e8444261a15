//! Synthetic reasoning tasks with a checkable answer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{DynamicsRecord, Evaluator};
use crate::policy::{mean_token_entropy, rollouts_for, NGramPolicy, Rollout, SamplerConfig, Token, Vocabulary};
use crate::rng::child_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Answer is the sum of the prompt tokens modulo the number of symbols.
    ModSum,
    /// Answer is the prompt itself.
    Copy,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mod_sum" | "modsum" => Ok(TaskKind::ModSum),
            "copy" => Ok(TaskKind::Copy),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// Prompts are drawn from the symbols `0..V-1`; token `V-1` is eos.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyTask {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub prompt_len: usize,
}

impl ToyTask {
    pub fn new(kind: TaskKind, vocab_size: usize, prompt_len: usize) -> Result<Self> {
        if vocab_size < 3 {
            return Err(Error::Config("toy tasks need at least 2 symbols plus eos".into()));
        }
        if prompt_len == 0 {
            return Err(Error::Config("prompt_len must be >= 1".into()));
        }
        Ok(Self {
            kind,
            vocab_size,
            prompt_len,
        })
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::new(self.vocab_size, Some(self.eos())).expect("validated in new")
    }

    pub fn eos(&self) -> Token {
        (self.vocab_size - 1) as Token
    }

    pub fn n_symbols(&self) -> usize {
        self.vocab_size - 1
    }

    /// The correct response, without the trailing eos.
    pub fn answer(&self, prompt: &[Token]) -> Vec<Token> {
        match self.kind {
            TaskKind::ModSum => {
                let s: usize = prompt.iter().map(|&t| t as usize).sum();
                vec![(s % self.n_symbols()) as Token]
            }
            TaskKind::Copy => prompt.to_vec(),
        }
    }

    /// A response is correct when it starts with the answer; anything after is ignored.
    pub fn is_correct(&self, prompt: &[Token], response: &[Token]) -> bool {
        response.starts_with(&self.answer(prompt))
    }

    pub fn reward(&self, prompt: &[Token], response: &[Token]) -> f64 {
        if self.is_correct(prompt, response) {
            1.0
        } else {
            0.0
        }
    }

    /// `n` prompts, prompt `i` drawn from the child stream `(seed, i)`.
    pub fn sample_prompts(&self, n: usize, seed: u64) -> Vec<Vec<Token>> {
        (0..n)
            .map(|i| {
                let mut rng = child_rng(seed, &[i as u64]);
                (0..self.prompt_len)
                    .map(|_| rng.gen_range(0..self.n_symbols()) as Token)
                    .collect()
            })
            .collect()
    }

    /// Every prompt in lexicographic order.
    pub fn all_prompts(&self) -> Vec<Vec<Token>> {
        let s = self.n_symbols();
        let total = s.pow(self.prompt_len as u32);
        (0..total)
            .map(|mut code| {
                let mut p = vec![0; self.prompt_len];
                for slot in p.iter_mut().rev() {
                    *slot = (code % s) as Token;
                    code /= s;
                }
                p
            })
            .collect()
    }
}

/// Parameters of the synthetic teacher.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTeacherConfig {
    pub seed: u64,
    /// Logit of the correct next token.
    pub strength: f64,
    /// Logit of eos where eos is not the correct token (the teacher's hedge).
    pub eos_logit: f64,
    /// Mean logit of every other token.
    pub floor: f64,
    /// Standard deviation of the Gaussian noise added to floor logits.
    pub noise: f64,
    /// Context length; `None` uses `prompt_len + 1`, enough to see the whole prompt.
    pub order: Option<usize>,
}

impl Default for ToyTeacherConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            strength: 4.0,
            eos_logit: 2.0,
            floor: -3.0,
            noise: 0.5,
            order: None,
        }
    }
}

/// Competent but imperfect teacher. Along every correct trajectory the next
/// token gets logit `strength`, eos gets `eos_logit` and the remaining tokens
/// sit at a noisy `floor`. Contexts off the correct trajectories use eos as
/// their target. When two trajectories share a context the first prompt in
/// lexicographic order wins.
pub fn toy_teacher(task: &ToyTask, cfg: &ToyTeacherConfig) -> Result<NGramPolicy> {
    let order = cfg.order.unwrap_or(task.prompt_len + 1);
    let finite = [cfg.strength, cfg.eos_logit, cfg.floor].iter().all(|x| x.is_finite());
    if !(finite && cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::Config("teacher logits must be finite and noise non-negative".into()));
    }
    let vocab = task.vocab();
    let v = vocab.size();
    let eos = task.eos() as usize;
    let mut targets: BTreeMap<usize, Token> = BTreeMap::new();
    let probe = NGramPolicy::zeros(vocab, order)?;
    for prompt in task.all_prompts() {
        let mut path = task.answer(&prompt);
        path.push(task.eos());
        for t in 0..path.len() {
            targets.entry(probe.context_index(&prompt, &path[..t])).or_insert(path[t]);
        }
    }
    let mut rng = child_rng(cfg.seed, &[0]);
    let normal = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut logits = Vec::with_capacity(probe.n_contexts() * v);
    for ctx in 0..probe.n_contexts() {
        let target = targets.get(&ctx).copied().unwrap_or(task.eos()) as usize;
        for y in 0..v {
            let noise = normal.sample(&mut rng);
            logits.push(if y == target {
                cfg.strength
            } else if y == eos {
                cfg.eos_logit
            } else {
                cfg.floor + noise
            });
        }
    }
    NGramPolicy::from_logits(vocab, order, 1.0, logits)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutStats {
    pub accuracy: f64,
    pub mean_entropy: f64,
    pub mean_len: f64,
}

pub fn rollout_stats(task: &ToyTask, rollouts: &[Rollout]) -> RolloutStats {
    let n = rollouts.len().max(1) as f64;
    RolloutStats {
        accuracy: rollouts.iter().map(|r| task.reward(&r.prompt, &r.response)).sum::<f64>() / n,
        mean_entropy: mean_token_entropy(rollouts),
        mean_len: rollouts.iter().map(|r| r.response.len() as f64).sum::<f64>() / n,
    }
}

/// Fraction of prompts whose sampled response is correct (one rollout per prompt).
pub fn accuracy_eval(
    policy: &NGramPolicy,
    task: &ToyTask,
    prompts: &[Vec<Token>],
    sampler: &SamplerConfig,
    max_len: usize,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::Config("accuracy_eval needs at least one prompt".into()));
    }
    let rollouts = rollouts_for(policy, prompts, sampler, 1, max_len)?;
    Ok(rollout_stats(task, &rollouts).accuracy)
}

/// Diagnostics on a fixed held-out prompt set with fixed rollout seeds.
#[derive(Debug, Clone)]
pub struct ToyEvaluator {
    pub task: ToyTask,
    pub prompts: Vec<Vec<Token>>,
    pub sampler: SamplerConfig,
    pub max_len: usize,
}

impl ToyEvaluator {
    pub fn stats(&self, policy: &NGramPolicy) -> Result<RolloutStats> {
        let rollouts = rollouts_for(policy, &self.prompts, &self.sampler, 1, self.max_len)?;
        Ok(rollout_stats(&self.task, &rollouts))
    }
}

impl Evaluator for ToyEvaluator {
    fn evaluate(&self, policy: &NGramPolicy, step: usize, value: f64) -> Result<DynamicsRecord> {
        let s = self.stats(policy)?;
        Ok(DynamicsRecord {
            step,
            accuracy: s.accuracy,
            mean_entropy: s.mean_entropy,
            mean_len: s.mean_len,
            value,
        })
    }
}
