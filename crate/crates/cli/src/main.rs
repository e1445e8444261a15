use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use distlab::curriculum::{parse_entropy_series, render_trace, simulate, CurriculumConfig, CurriculumStatus, OnFail};
use distlab::flops::{CostQuery, FlopsSummary, ModelDims};
use distlab::fused_kl::bench;
use distlab::harness::verify::decomposition_report;
use distlab::harness::{run_pipeline, run_verify, write_distill, write_grpo, RunConfig};
use distlab::{KlDirection, NGramPolicy};

#[derive(Parser)]
#[command(name = "distlab", version, about = "Autoregressive distillation lab on tabular policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Distill a student from the toy teacher.
    Distill(RunArgs),
    /// Run GRPO from a saved student.
    Grpo {
        #[command(flatten)]
        run: RunArgs,
        /// Student checkpoint to start from.
        #[arg(long)]
        student: PathBuf,
    },
    /// Distill, then run GRPO from the reloaded checkpoint.
    Pipeline(RunArgs),
    /// Run the invariant checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also print a chain-rule table for one random pair.
        #[arg(long)]
        decomposition: bool,
    },
    /// Per-step training cost of cached and student-prefix distillation.
    Flops(FlopsArgs),
    /// Replay the entropy-gated horizon curriculum over a series of readings.
    CurriculumSim(CurriculumArgs),
    /// Time the fused vocabulary-tiled KL kernel.
    KernelBench(BenchArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set objective.lambda=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Named preset the config file and overrides are layered on.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(RunConfig::PRESETS))]
    preset: Option<String>,
    /// Output directory.
    #[arg(long, env = "DISTLAB_OUT_DIR", default_value = "runs/latest")]
    out: PathBuf,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        RunConfig::resolve(self.preset.as_deref(), self.config.as_deref(), &self.overrides).context("loading config")
    }
}

#[derive(Args)]
struct FlopsArgs {
    /// Student preset (qwen3-0.6b, qwen3-4b, qwen3-8b).
    #[arg(long, default_value = "qwen3-0.6b", conflicts_with = "student_dims")]
    student: String,
    /// Teacher preset.
    #[arg(long, default_value = "qwen3-4b", conflicts_with = "teacher_dims")]
    teacher: String,
    /// Explicit student dims: hidden,intermediate,layers,heads,kv_heads,head_dim,vocab.
    #[arg(long, value_parser = parse_dims)]
    student_dims: Option<ModelDims>,
    #[arg(long, value_parser = parse_dims)]
    teacher_dims: Option<ModelDims>,
    #[arg(short = 'b', long, default_value_t = CostQuery::REFERENCE_128.batch)]
    batch: u64,
    #[arg(short = 'p', long, default_value_t = CostQuery::REFERENCE_128.prompt_len)]
    prompt_len: u64,
    #[arg(short = 'r', long, default_value_t = CostQuery::REFERENCE_128.response_len)]
    response_len: u64,
    #[arg(long)]
    json: bool,
}

fn parse_dims(s: &str) -> std::result::Result<ModelDims, String> {
    let v: Vec<u64> = s
        .split(',')
        .map(|x| x.trim().parse::<u64>().map_err(|e| format!("`{x}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    let [hidden, intermediate, layers, n_heads, kv_heads, head_dim, vocab] = v[..] else {
        return Err(format!("expected 7 comma-separated values, got {}", v.len()));
    };
    let dims = ModelDims {
        hidden,
        intermediate,
        layers,
        n_heads,
        kv_heads,
        head_dim,
        vocab,
    };
    dims.validate().map_err(|e| e.to_string())?;
    Ok(dims)
}

#[derive(Args)]
struct CurriculumArgs {
    /// File with one held-out entropy reading per line.
    series: PathBuf,
    /// Comma-separated horizon ladder.
    #[arg(long, value_delimiter = ',', default_values_t = CurriculumConfig::default().horizons)]
    horizons: Vec<usize>,
    #[arg(long, default_value_t = CurriculumConfig::default().h_min)]
    h_min: f64,
    /// `hold` or `terminate`.
    #[arg(long, default_value = "hold")]
    on_fail: OnFail,
    #[arg(long, default_value_t = CurriculumConfig::default().check_interval)]
    check_interval: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 151_936)]
    vocab: usize,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 4096)]
    tile: usize,
    /// `forward` or `reverse`.
    #[arg(long, default_value = "forward")]
    direction: KlDirection,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn list_artifacts(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn last_line(name: &str, records: &[distlab::objectives::DynamicsRecord]) {
    if let Some(r) = records.last() {
        println!(
            "{name}: step {} accuracy {:.4} entropy {:.4} length {:.3}",
            r.step, r.accuracy, r.mean_entropy, r.mean_len
        );
    }
}

fn grpo(args: &RunArgs, student: &Path) -> Result<()> {
    let cfg = args.config()?;
    let mut policy = NGramPolicy::load(student).with_context(|| format!("loading {}", student.display()))?;
    let (records, arts) = write_grpo(&cfg, &mut policy, &args.out)?;
    list_artifacts(&arts.files);
    last_line("grpo", &records);
    Ok(())
}

fn flops(args: &FlopsArgs) -> Result<()> {
    let student = match args.student_dims {
        Some(d) => d,
        None => ModelDims::preset(&args.student)?,
    };
    let teacher = match args.teacher_dims {
        Some(d) => d,
        None => ModelDims::preset(&args.teacher)?,
    };
    let query = CostQuery {
        batch: args.batch,
        prompt_len: args.prompt_len,
        response_len: args.response_len,
    };
    let summary = FlopsSummary::compute(student, teacher, query)?;
    if args.json {
        println!("{}", summary.to_json());
    } else {
        print!("{}", summary.render_text());
    }
    Ok(())
}

fn curriculum_sim(args: &CurriculumArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.series).with_context(|| format!("reading {}", args.series.display()))?;
    let config = CurriculumConfig {
        horizons: args.horizons.clone(),
        h_min: args.h_min,
        on_fail: args.on_fail,
        check_interval: args.check_interval,
    };
    let (state, trace) = simulate(&config, &parse_entropy_series(&text)?)?;
    print!("{}", render_trace(&config, &state, &trace));
    if state.status() == CurriculumStatus::Terminated {
        eprintln!("curriculum terminated");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Distill(args) => {
            let cfg = args.config()?;
            let (run, arts) = write_distill(&cfg, &args.out)?;
            list_artifacts(&arts.files);
            last_line("distill", &run.outcome.records);
        }
        Command::Grpo { run, student } => grpo(&run, &student)?,
        Command::Pipeline(args) => {
            let cfg = args.config()?;
            let out = run_pipeline(&cfg, &args.out, true)?;
            list_artifacts(&out.artifacts.files);
            last_line("distill", &out.distill);
            last_line("grpo", out.grpo.as_deref().unwrap_or_default());
        }
        Command::Verify { seed, decomposition } => {
            let report = run_verify(seed)?;
            print!("{}", report.render());
            if decomposition {
                print!("{}", decomposition_report(3, 2, 5, seed)?);
            }
            return Ok(report.passed());
        }
        Command::Flops(args) => flops(&args)?,
        Command::CurriculumSim(args) => curriculum_sim(&args)?,
        Command::KernelBench(a) => {
            if a.tile == 0 || a.tile > a.vocab {
                bail!("--tile must be in 1..={}", a.vocab);
            }
            println!("{}", bench(a.vocab, a.hidden, a.tile, a.direction, a.reps, a.seed)?.to_json());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
