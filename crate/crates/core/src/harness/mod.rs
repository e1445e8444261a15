//! End-to-end runs on synthetic tasks: toy teachers, accuracy evaluation,
//! GRPO, config handling, record files and the distill-then-RL pipeline.

pub mod config;
pub mod grpo;
pub mod pipeline;
pub mod records;
pub mod task;
pub mod verify;

pub use config::RunConfig;
pub use grpo::{group_advantages, grpo_step, run_grpo, GrpoConfig, GrpoStepReport, LengthNorm};
pub use pipeline::{run_distill, run_grpo_stage, run_pipeline, write_distill, write_grpo, RunContext};
pub use records::{emit_plot_data, read_records, write_records};
pub use task::{accuracy_eval, toy_teacher, TaskKind, ToyEvaluator, ToyTask, ToyTeacherConfig};
pub use verify::{run_verify, VerifyReport};
