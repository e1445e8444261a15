//! Distillation objectives as executable training steps.
//!
//! An [`ObjectiveSpec`] picks a point in the (prefix source x KL direction)
//! design space. A step collects states from the chosen source, evaluates the
//! mixed token-level loss between teacher and student at every state up to the
//! horizon, averages the per-token gradients and takes one descent step.
//!
//! | source  | lambda | reading                                   |
//! |---------|--------|-------------------------------------------|
//! | teacher | 0      | soft-label SFT on teacher rollouts        |
//! | teacher | 1      | reverse KL on fixed teacher states        |
//! | student | 0      | forward KL on student states              |
//! | student | 1      | on-policy distillation (dense log-ratio RL) |

use serde::{Deserialize, Serialize};

use crate::curriculum::{CurriculumConfig, CurriculumState, CurriculumStatus};
use crate::error::{Error, Result};
use crate::grad::{forward_row, mixed_row, GradTable};
use crate::kl::{mixed_kl, MixWeight};
use crate::policy::{mean_rollout_entropy, rollout_with_rng, rollouts_for, NGramPolicy, SamplerConfig, Token, TokenDist};
use crate::rng::{child_rng, derive_seed};

pub use crate::seq_kl::PrefixSource;

/// Default tabular learning rate.
pub const DEFAULT_LR: f64 = 0.1;
/// Learning rate used for the 0.6B transformer runs, kept as a preset.
pub const TRANSFORMER_LR: f64 = 5e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub source: PrefixSource,
    /// Weight on reverse KL: 1 is pure reverse, 0 pure forward.
    pub lambda: MixWeight,
    /// Maximum number of response positions supervised per rollout.
    pub horizon: usize,
    /// Replace the teacher distribution with a point mass on a teacher-sampled token.
    pub hard_label: bool,
}

impl Default for ObjectiveSpec {
    /// On-policy reverse KL over 8 tokens.
    fn default() -> Self {
        Self::new(PrefixSource::Student, MixWeight::REVERSE, 8)
    }
}

impl ObjectiveSpec {
    pub fn new(source: PrefixSource, lambda: MixWeight, horizon: usize) -> Self {
        Self {
            source,
            lambda,
            horizon,
            hard_label: false,
        }
    }

    /// Negative log-likelihood on cached teacher tokens.
    pub fn sft(horizon: usize) -> Self {
        Self {
            source: PrefixSource::Teacher,
            lambda: MixWeight::FORWARD,
            horizon,
            hard_label: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        if self.hard_label && self.lambda.value() != 0.0 {
            return Err(Error::Config("hard-label training is forward-only (lambda must be 0)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CachedRollout {
    pub prompt: Vec<Token>,
    pub response: Vec<Token>,
    /// Teacher distribution at each response position, when cached.
    pub dists: Option<Vec<TokenDist>>,
}

/// Fixed teacher rollouts (and optionally teacher distributions) reused for
/// every teacher-prefix step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TeacherCache {
    pub entries: Vec<CachedRollout>,
}

impl TeacherCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Recomputes the cached distributions of every `stride`-th entry from the
    /// live teacher and fails on the first mismatch.
    pub fn validate_against(&self, teacher: &NGramPolicy, stride: usize) -> Result<()> {
        for entry in self.entries.iter().step_by(stride.max(1)) {
            let Some(dists) = &entry.dists else { continue };
            for (t, cached) in dists.iter().enumerate() {
                let live = teacher.dist_at(teacher.context_index(&entry.prompt, &entry.response[..t]));
                if &live != cached {
                    return Err(Error::Config(format!("cached teacher distribution differs at position {t}")));
                }
            }
        }
        Ok(())
    }
}

/// Samples one teacher rollout per prompt (child seed `(sampler.seed, i, 0)`).
pub fn build_teacher_cache(
    teacher: &NGramPolicy,
    prompts: &[Vec<Token>],
    sampler: &SamplerConfig,
    horizon: usize,
    with_dists: bool,
) -> Result<TeacherCache> {
    let rollouts = rollouts_for(teacher, prompts, sampler, 1, horizon)?;
    let entries = rollouts
        .into_iter()
        .map(|r| {
            let dists = with_dists.then(|| {
                (0..r.response.len())
                    .map(|t| teacher.dist_at(teacher.context_index(&r.prompt, &r.response[..t])))
                    .collect()
            });
            CachedRollout {
                prompt: r.prompt,
                response: r.response,
                dists,
            }
        })
        .collect();
    let cache = TeacherCache { entries };
    cache.validate_against(teacher, 7)?;
    Ok(cache)
}

/// Where teacher information comes from during distillation.
#[derive(Debug, Clone, Copy)]
pub struct DistillSetup<'a> {
    pub teacher: Option<&'a NGramPolicy>,
    pub cache: Option<&'a TeacherCache>,
    /// Prompt pool for student-prefix steps.
    pub prompts: &'a [Vec<Token>],
    /// Sampler for student rollouts.
    pub student_sampler: SamplerConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillStepReport {
    /// Mean per-token loss before the update.
    pub mean_loss: f64,
    pub tokens_supervised: usize,
    pub grad_norm: f64,
    /// Largest number of generated tokens in any supervised prefix, plus one.
    pub max_position: usize,
}

/// Mean per-token loss gradient for one batch, without applying it.
pub struct BatchGradient {
    pub grad: GradTable,
    pub mean_loss: f64,
    pub tokens_supervised: usize,
    pub max_position: usize,
}

struct Accumulator {
    grad: GradTable,
    loss: f64,
    tokens: usize,
    max_position: usize,
}

impl Accumulator {
    fn add(&mut self, student: &NGramPolicy, ctx: usize, target: &TokenDist, lambda: MixWeight, position: usize) -> Result<()> {
        let q = student.dist_at(ctx);
        let tau = student.temperature();
        self.loss += mixed_kl(target, &q, lambda)?;
        self.grad.add_row_scaled(ctx, &mixed_row(&q, target, tau, lambda)?, 1.0);
        self.tokens += 1;
        self.max_position = self.max_position.max(position + 1);
        Ok(())
    }

    fn add_hard(&mut self, student: &NGramPolicy, ctx: usize, token: Token, position: usize) -> Result<()> {
        let q = student.dist_at(ctx);
        let qy = q.prob(token as usize);
        if qy <= 0.0 {
            return Err(Error::ZeroProbability { token: token as usize });
        }
        self.loss -= qy.ln();
        let target = TokenDist::point_mass(q.len(), token);
        self.grad.add_row_scaled(ctx, &forward_row(&q, &target, student.temperature()), 1.0);
        self.tokens += 1;
        self.max_position = self.max_position.max(position + 1);
        Ok(())
    }

    fn finish(self) -> BatchGradient {
        let n = self.tokens.max(1) as f64;
        BatchGradient {
            grad: self.grad.scaled(1.0 / n),
            mean_loss: self.loss / n,
            tokens_supervised: self.tokens,
            max_position: self.max_position,
        }
    }
}

/// Gradient of the mean per-token objective over `batch`. For teacher-prefix
/// specs `batch` indexes cache entries; for student-prefix specs it indexes
/// `setup.prompts`, and rollout `b` uses the child seed `(step_seed, b)`.
pub fn distill_gradient(
    spec: &ObjectiveSpec,
    student: &NGramPolicy,
    setup: &DistillSetup<'_>,
    batch: &[usize],
    step_seed: u64,
) -> Result<BatchGradient> {
    spec.validate()?;
    if batch.is_empty() {
        return Err(Error::Config("batch must not be empty".into()));
    }
    let mut acc = Accumulator {
        grad: GradTable::zeros_like(student),
        loss: 0.0,
        tokens: 0,
        max_position: 0,
    };
    match spec.source {
        PrefixSource::Teacher => {
            let cache = setup
                .cache
                .ok_or_else(|| Error::Config("teacher-prefix training needs a teacher cache".into()))?;
            for &i in batch {
                let entry = cache
                    .entries
                    .get(i)
                    .ok_or_else(|| Error::Config(format!("cache index {i} out of range")))?;
                let len = entry.response.len().min(spec.horizon);
                for t in 0..len {
                    let ctx = student.context_index(&entry.prompt, &entry.response[..t]);
                    if spec.hard_label {
                        acc.add_hard(student, ctx, entry.response[t], t)?;
                        continue;
                    }
                    let target = match (&entry.dists, setup.teacher) {
                        (Some(d), _) => d[t].clone(),
                        (None, Some(teacher)) => {
                            teacher.dist_at(teacher.context_index(&entry.prompt, &entry.response[..t]))
                        }
                        (None, None) => {
                            return Err(Error::Config(
                                "soft-label teacher-prefix training needs cached distributions or a live teacher".into(),
                            ))
                        }
                    };
                    acc.add(student, ctx, &target, spec.lambda, t)?;
                }
            }
        }
        PrefixSource::Student => {
            let teacher = setup.teacher.ok_or_else(|| {
                Error::Config("student-prefix training queries the teacher at student states; no live teacher given".into())
            })?;
            for (b, &i) in batch.iter().enumerate() {
                let prompt = setup
                    .prompts
                    .get(i)
                    .ok_or_else(|| Error::Config(format!("prompt index {i} out of range")))?;
                let mut rng = child_rng(step_seed, &[b as u64]);
                let r = rollout_with_rng(student, prompt, spec.horizon, &setup.student_sampler, &mut rng)?;
                for t in 0..r.response.len() {
                    let ctx = student.context_index(prompt, &r.response[..t]);
                    let target = teacher.dist_at(teacher.context_index(prompt, &r.response[..t]));
                    if spec.hard_label {
                        let token = target.sample(&mut rng);
                        acc.add_hard(student, ctx, token, t)?;
                    } else {
                        acc.add(student, ctx, &target, spec.lambda, t)?;
                    }
                }
            }
        }
    }
    Ok(acc.finish())
}

/// One gradient-descent update of `student` on `batch`.
pub fn distill_step(
    spec: &ObjectiveSpec,
    student: &mut NGramPolicy,
    setup: &DistillSetup<'_>,
    batch: &[usize],
    learning_rate: f64,
    step_seed: u64,
) -> Result<DistillStepReport> {
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(Error::Config(format!("learning rate must be positive, got {learning_rate}")));
    }
    let g = distill_gradient(spec, student, setup, batch, step_seed)?;
    g.grad.apply_descent(student, learning_rate);
    Ok(DistillStepReport {
        mean_loss: g.mean_loss,
        tokens_supervised: g.tokens_supervised,
        grad_norm: g.grad.norm(),
        max_position: g.max_position,
    })
}

/// One row of a training-dynamics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRecord {
    pub step: usize,
    pub accuracy: f64,
    /// Mean per-token predictive entropy in nats.
    pub mean_entropy: f64,
    /// Mean response length in tokens.
    pub mean_len: f64,
    /// Training loss for distillation runs, mean reward for RL runs.
    pub value: f64,
}

/// Produces diagnostics for the current student.
pub trait Evaluator {
    fn evaluate(&self, policy: &NGramPolicy, step: usize, value: f64) -> Result<DynamicsRecord>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 32,
            lr: DEFAULT_LR,
            seed: 0,
            eval_every: 20,
        }
    }
}

/// Curriculum wiring for [`train`]: the gate reads the student's mean
/// rollout entropy on a fixed held-out prompt set.
#[derive(Debug, Clone)]
pub struct CurriculumRun {
    pub config: CurriculumConfig,
    pub held_out: Vec<Vec<Token>>,
    pub sampler: SamplerConfig,
    pub rollouts_per_prompt: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub horizon: usize,
    pub report: DistillStepReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub records: Vec<DynamicsRecord>,
    pub steps: Vec<StepLog>,
    pub curriculum: Option<CurriculumState>,
}

/// Walks shuffled epochs over `0..n`, `batch` indices at a time.
struct EpochBatches {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl EpochBatches {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut s = Self {
            n,
            batch,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        use rand::seq::SliceRandom;
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut child_rng(self.seed, &[self.epoch]));
        self.pos = 0;
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.n {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

const BATCH_STREAM: u64 = 1;
const STEP_STREAM: u64 = 2;

/// Runs `cfg.steps` distillation steps, recording diagnostics every
/// `cfg.eval_every` steps. With a curriculum, each step's horizon is
/// `min(spec.horizon, current rung)` and the gate is read every
/// `check_interval` steps; a terminated curriculum ends training early.
pub fn train(
    spec: &ObjectiveSpec,
    student: &mut NGramPolicy,
    setup: &DistillSetup<'_>,
    cfg: &TrainConfig,
    curriculum: Option<&CurriculumRun>,
    evaluator: &dyn Evaluator,
) -> Result<TrainOutcome> {
    spec.validate()?;
    if cfg.steps == 0 {
        return Err(Error::Config("steps must be >= 1".into()));
    }
    if cfg.batch == 0 || cfg.eval_every == 0 {
        return Err(Error::Config("batch and eval_every must be >= 1".into()));
    }
    if let Some(c) = curriculum {
        c.config.validate()?;
    }
    let pool = match spec.source {
        PrefixSource::Teacher => setup.cache.map_or(0, TeacherCache::len),
        PrefixSource::Student => setup.prompts.len(),
    };
    if pool == 0 {
        return Err(Error::Config(format!("no {} prefixes to train on", spec.source)));
    }
    let mut batches = EpochBatches::new(pool, cfg.batch, derive_seed(cfg.seed, &[BATCH_STREAM]));
    let mut state = curriculum.map(|_| CurriculumState::new());
    let mut records = Vec::new();
    let mut steps = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        let horizon = match (&state, curriculum) {
            (Some(s), Some(c)) => spec.horizon.min(s.current_horizon(&c.config)),
            _ => spec.horizon,
        };
        let step_spec = ObjectiveSpec { horizon, ..*spec };
        let batch = batches.next_batch();
        let report = distill_step(
            &step_spec,
            student,
            setup,
            &batch,
            cfg.lr,
            derive_seed(cfg.seed, &[STEP_STREAM, step as u64]),
        )?;
        steps.push(StepLog { step, horizon, report });

        if step % cfg.eval_every == 0 {
            records.push(evaluator.evaluate(student, step, report.mean_loss)?);
        }
        if let (Some(s), Some(c)) = (state.as_mut(), curriculum) {
            if step % c.config.check_interval == 0 && s.status() == CurriculumStatus::Running {
                let sampler = c.sampler;
                let h = mean_rollout_entropy(student, &c.held_out, &sampler, c.rollouts_per_prompt, horizon)?;
                s.observe(&c.config, step, h)?;
                if s.status() == CurriculumStatus::Terminated {
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome {
        records,
        steps,
        curriculum: state,
    })
}
