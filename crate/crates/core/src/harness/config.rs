//! Run configuration: TOML files plus `key.path=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::grpo::GrpoConfig;
use super::task::{TaskKind, ToyTask, ToyTeacherConfig};
use crate::curriculum::CurriculumConfig;
use crate::error::{Error, Result};
use crate::objectives::{ObjectiveSpec, TrainConfig, DEFAULT_LR, TRANSFORMER_LR};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub vocab: usize,
    pub prompt_len: usize,
    /// Size of the training prompt pool.
    pub train_prompts: usize,
    /// Size of the fixed held-out prompt set.
    pub eval_prompts: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::ModSum,
            vocab: 8,
            prompt_len: 2,
            train_prompts: 256,
            eval_prompts: 128,
        }
    }
}

impl TaskConfig {
    pub fn task(&self) -> Result<ToyTask> {
        ToyTask::new(self.kind, self.vocab, self.prompt_len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentConfig {
    pub order: usize,
    /// Standard deviation of the initial logits.
    pub init_scale: f64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            order: 2,
            init_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Run seed; every random stream of the run derives from it.
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 32,
            lr: DEFAULT_LR,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub every: usize,
    pub max_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { every: 20, max_len: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskConfig,
    pub teacher: ToyTeacherConfig,
    pub student: StudentConfig,
    pub objective: ObjectiveSpec,
    pub train: TrainSection,
    pub eval: EvalConfig,
    pub grpo: GrpoConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub curriculum: Option<CurriculumConfig>,
}

impl RunConfig {
    /// Distillation budget of the 0.6B transformer runs. The learning rate is
    /// far too small to move a tabular student.
    pub fn paper_distill() -> Self {
        Self {
            train: TrainSection {
                steps: 1000,
                batch: 32,
                lr: TRANSFORMER_LR,
                seed: 0,
            },
            eval: EvalConfig {
                every: 30,
                ..EvalConfig::default()
            },
            ..Self::default()
        }
    }

    /// GRPO budget of the 0.6B transformer runs.
    pub fn paper_grpo() -> Self {
        let mut cfg = Self::default();
        cfg.grpo.steps = 1000;
        cfg.grpo.lr = TRANSFORMER_LR;
        cfg.grpo.eval_every = 30;
        cfg
    }

    pub const PRESETS: [&'static str; 3] = ["desk", "paper-distill", "paper-grpo"];

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" | "default" => Ok(Self::default()),
            "paper-distill" => Ok(Self::paper_distill()),
            "paper-grpo" => Ok(Self::paper_grpo()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (known: {})",
                Self::PRESETS.join(", ")
            ))),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            batch: self.train.batch,
            lr: self.train.lr,
            seed: self.train.seed,
            eval_every: self.eval.every,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.task()?;
        self.objective.validate()?;
        self.grpo.validate()?;
        if let Some(c) = &self.curriculum {
            c.validate()?;
        }
        if self.student.order == 0 {
            return Err(Error::Config("student.order must be >= 1".into()));
        }
        if self.task.train_prompts == 0 || self.task.eval_prompts == 0 {
            return Err(Error::Config("prompt pools must be non-empty".into()));
        }
        if self.train.steps == 0 || self.train.batch == 0 || self.eval.every == 0 || self.eval.max_len == 0 {
            return Err(Error::Config("train.steps, train.batch, eval.every and eval.max_len must be >= 1".into()));
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.train.lr)));
        }
        Ok(())
    }

    /// Parses `text`, applies `overrides` in order and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or the defaults when `None`) and applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    /// Layers a named preset, then the file at `path`, then `overrides`.
    pub fn resolve(preset: Option<&str>, path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = Self::preset(preset.unwrap_or("desk"))?;
        let mut table: toml::Table = toml::from_str(&base.to_toml()?).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let file: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            merge_tables(&mut table, file);
        }
        Self::from_toml_str(&toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn merge_tables(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge_tables(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies one `a.b.c=value` override. The value is read as a TOML literal
/// when it parses as one and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, path) = parts.split_last().expect("non-empty");
    let mut cursor = table;
    for p in path {
        let entry = cursor
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key `{key}`: `{p}` is not a table")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}
