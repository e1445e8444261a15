//! Distill, checkpoint, then optionally run GRPO from the checkpoint.
//!
//! Every random stream is derived from `train.seed`, so the same config
//! produces byte-identical output files.

use std::path::{Path, PathBuf};

use super::config::RunConfig;
use super::grpo::run_grpo;
use super::records::{emit_plot_data, write_records};
use super::task::{toy_teacher, ToyEvaluator, ToyTask};
use crate::curriculum::CurriculumStatus;
use crate::error::{Error, Result};
use crate::objectives::{
    build_teacher_cache, train, CurriculumRun, DistillSetup, DynamicsRecord, PrefixSource, TrainOutcome,
};
use crate::policy::{NGramPolicy, SamplerConfig, Token};
use crate::rng::{derive_seed, rng_from_seed};

const TRAIN_PROMPTS: u64 = 10;
const EVAL_PROMPTS: u64 = 11;
const CACHE: u64 = 12;
const STUDENT_INIT: u64 = 13;
const DISTILL: u64 = 14;
const GRPO: u64 = 15;
const EVAL_ROLLOUTS: u64 = 16;
const CURRICULUM_ROLLOUTS: u64 = 17;

/// Everything a run needs that is fixed by the config.
pub struct RunContext {
    pub task: ToyTask,
    pub teacher: NGramPolicy,
    pub train_prompts: Vec<Vec<Token>>,
    pub evaluator: ToyEvaluator,
}

impl RunContext {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let task = cfg.task.task()?;
        let teacher = toy_teacher(&task, &cfg.teacher)?;
        let seed = cfg.train.seed;
        let train_prompts = task.sample_prompts(cfg.task.train_prompts, derive_seed(seed, &[TRAIN_PROMPTS]));
        let evaluator = ToyEvaluator {
            task,
            prompts: task.sample_prompts(cfg.task.eval_prompts, derive_seed(seed, &[EVAL_PROMPTS])),
            sampler: SamplerConfig::default().with_seed(derive_seed(seed, &[EVAL_ROLLOUTS])),
            max_len: cfg.eval.max_len,
        };
        Ok(Self {
            task,
            teacher,
            train_prompts,
            evaluator,
        })
    }

    pub fn initial_student(&self, cfg: &RunConfig) -> Result<NGramPolicy> {
        let mut rng = rng_from_seed(derive_seed(cfg.train.seed, &[STUDENT_INIT]));
        NGramPolicy::random(self.task.vocab(), cfg.student.order, cfg.student.init_scale, &mut rng)
    }
}

pub struct DistillRun {
    pub student: NGramPolicy,
    pub outcome: TrainOutcome,
}

/// Trains a fresh student with the configured objective; no files are written.
pub fn run_distill(cfg: &RunConfig, ctx: &RunContext) -> Result<DistillRun> {
    let mut student = ctx.initial_student(cfg)?;
    let spec = cfg.objective;
    let cache = match spec.source {
        PrefixSource::Teacher => Some(build_teacher_cache(
            &ctx.teacher,
            &ctx.train_prompts,
            &SamplerConfig::teacher_rollouts(derive_seed(cfg.train.seed, &[CACHE])),
            spec.horizon,
            !spec.hard_label,
        )?),
        PrefixSource::Student => None,
    };
    let setup = DistillSetup {
        teacher: Some(&ctx.teacher),
        cache: cache.as_ref(),
        prompts: &ctx.train_prompts,
        student_sampler: SamplerConfig::default(),
    };
    let curriculum = cfg.curriculum.clone().map(|config| CurriculumRun {
        config,
        held_out: ctx.evaluator.prompts.clone(),
        sampler: SamplerConfig::default().with_seed(derive_seed(cfg.train.seed, &[CURRICULUM_ROLLOUTS])),
        rollouts_per_prompt: 1,
    });
    let mut train_cfg = cfg.train_config();
    train_cfg.seed = derive_seed(cfg.train.seed, &[DISTILL]);
    let outcome = train(&spec, &mut student, &setup, &train_cfg, curriculum.as_ref(), &ctx.evaluator)?;
    Ok(DistillRun { student, outcome })
}

/// GRPO from `student` with the configured settings; no files are written.
pub fn run_grpo_stage(cfg: &RunConfig, ctx: &RunContext, student: &mut NGramPolicy) -> Result<Vec<DynamicsRecord>> {
    if student.vocab() != &ctx.task.vocab() {
        return Err(Error::Config("student vocabulary does not match the task".into()));
    }
    run_grpo(
        student,
        &ctx.task,
        &cfg.grpo,
        &ctx.train_prompts,
        &ctx.evaluator,
        derive_seed(cfg.train.seed, &[GRPO]),
    )
}

/// Paths written by a stage, in creation order.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub files: Vec<PathBuf>,
}

impl Artifacts {
    fn push(&mut self, p: PathBuf) -> &Path {
        self.files.push(p);
        self.files.last().unwrap()
    }
}

fn prepare_dir(out: &Path, cfg: &RunConfig, arts: &mut Artifacts) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let p = arts.push(out.join("config.toml"));
    std::fs::write(p, cfg.to_toml()?).map_err(|e| Error::io(p, e))
}

fn curriculum_log(outcome: &TrainOutcome) -> Option<String> {
    let state = outcome.curriculum.as_ref()?;
    let mut s = String::from("step,entropy,horizon,decision\n");
    for o in state.history() {
        s.push_str(&format!("{},{:.16e},{},{}\n", o.step, o.entropy, o.horizon, o.decision));
    }
    let status = match state.status() {
        CurriculumStatus::Running => "running",
        CurriculumStatus::Frozen => "frozen",
        CurriculumStatus::Terminated => "terminated",
    };
    s.push_str(&format!("# final stage {} status {status}\n", state.stage()));
    Some(s)
}

/// Distillation stage with outputs: `config.toml`, `distill.csv`,
/// `student.policy`, `curriculum.csv` when gated, and plot series.
pub fn write_distill(cfg: &RunConfig, out: &Path) -> Result<(DistillRun, Artifacts)> {
    let mut arts = Artifacts::default();
    prepare_dir(out, cfg, &mut arts)?;
    let ctx = RunContext::new(cfg)?;
    let run = run_distill(cfg, &ctx)?;
    let p = arts.push(out.join("distill.csv"));
    write_records(p, &run.outcome.records)?;
    let p = arts.push(out.join("student.policy"));
    run.student.save(p)?;
    if let Some(log) = curriculum_log(&run.outcome) {
        let p = arts.push(out.join("curriculum.csv"));
        std::fs::write(p, log).map_err(|e| Error::io(p, e))?;
    }
    arts.files.extend(emit_plot_data(&run.outcome.records, &out.join("plots"), "distill")?);
    Ok((run, arts))
}

/// GRPO stage from a checkpoint: `grpo.csv`, `grpo_student.policy` and plot series.
pub fn write_grpo(cfg: &RunConfig, student: &mut NGramPolicy, out: &Path) -> Result<(Vec<DynamicsRecord>, Artifacts)> {
    let mut arts = Artifacts::default();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ctx = RunContext::new(cfg)?;
    let records = run_grpo_stage(cfg, &ctx, student)?;
    let p = arts.push(out.join("grpo.csv"));
    write_records(p, &records)?;
    let p = arts.push(out.join("grpo_student.policy"));
    student.save(p)?;
    arts.files.extend(emit_plot_data(&records, &out.join("plots"), "grpo")?);
    Ok((records, arts))
}

pub struct PipelineOutput {
    pub distill: Vec<DynamicsRecord>,
    pub grpo: Option<Vec<DynamicsRecord>>,
    pub student: NGramPolicy,
    pub artifacts: Artifacts,
}

/// Distills, writes the checkpoint, reloads it and (when `with_grpo`) runs
/// GRPO from the reloaded student.
pub fn run_pipeline(cfg: &RunConfig, out: &Path, with_grpo: bool) -> Result<PipelineOutput> {
    let (run, mut artifacts) = write_distill(cfg, out)?;
    let mut student = NGramPolicy::load(&out.join("student.policy"))?;
    if student != run.student {
        return Err(Error::Format("checkpoint did not reload exactly".into()));
    }
    let grpo = if with_grpo {
        let (records, arts) = write_grpo(cfg, &mut student, out)?;
        artifacts.files.extend(arts.files);
        Some(records)
    } else {
        None
    };
    Ok(PipelineOutput {
        distill: run.outcome.records,
        grpo,
        student,
        artifacts,
    })
}
