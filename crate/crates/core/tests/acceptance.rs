//! Acceptance suite: one line per criterion, non-zero exit on any failure.

use std::time::{Duration, Instant};

use distlab::curriculum::{simulate, CurriculumConfig, CurriculumStatus, Decision, OnFail};
use distlab::flops::{step_costs, CostQuery, FlopsSummary, ModelDims};
use distlab::fused_kl::{dense, fused_token_kl, fused_token_kl_grad, memory_probe, HeadWeights, HiddenState, ProbeOp, TileConfig};
use distlab::grad::{finite_diff_grad_rows, grad_mixed_kl};
use distlab::harness::pipeline::{run_pipeline, RunContext};
use distlab::harness::{group_advantages, grpo_step, run_grpo, GrpoConfig, RunConfig, TaskKind, ToyTask};
use distlab::kl::{estimator_expectation, estimator_sample, mixed_kl, reverse_kl, EstimatorKind};
use distlab::objectives::{build_teacher_cache, train, DistillSetup, DynamicsRecord, Evaluator, ObjectiveSpec, PrefixSource, TrainConfig};
use distlab::policy::{mean_rollout_entropy, NGramPolicy, Prefix, SamplerConfig, Token, TokenDist, Vocabulary};
use distlab::rng::{child_rng, rng_from_seed};
use distlab::seq_kl::{decomposition_check, mean_sequence_kl, EnumerationSpec};
use distlab::{KlDirection, MixWeight};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within_budget(start: Instant, budget: Duration, detail: String) -> Outcome {
    let took = start.elapsed();
    check(took < budget, format!("{detail}; {:.2}s of {}s", took.as_secs_f64(), budget.as_secs()))
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn decomposition() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for i in 0..50u64 {
        let mut rng = child_rng(1, &[i]);
        let v = 2 + (i % 2) as usize;
        let length = 1 + ((i / 2) % 5) as usize;
        let eos = if i % 3 == 0 { Some((v - 1) as Token) } else { None };
        let vocab = Vocabulary::new(v, eos).map_err(err)?;
        let order = 1 + (i % 2) as usize;
        let teacher = NGramPolicy::random(vocab, order, 1.5, &mut rng).map_err(err)?;
        let student = NGramPolicy::random(vocab, order, 1.5, &mut rng).map_err(err)?;
        let spec = EnumerationSpec::new(vocab, length, vec![0]);
        for dir in KlDirection::ALL {
            worst = worst.max(decomposition_check(dir, &teacher, &student, &spec).map_err(err)?.gap);
        }
    }
    if worst > 1e-10 {
        return Err(format!("max gap {worst:.3e} > 1e-10"));
    }
    within_budget(start, Duration::from_secs(10), format!("50 pairs, max gap {worst:.3e}"))
}

/// Gradient of `KL(p || q)` written as `E_p[-d log q]`.
fn forward_identity(q: &TokenDist, p: &TokenDist, tau: f64) -> Vec<f64> {
    let v = q.len();
    let mut g = vec![0.0; v];
    for y in 0..v {
        for (j, gj) in g.iter_mut().enumerate() {
            let onehot = if j == y { 1.0 } else { 0.0 };
            *gj += p.prob(y) * (q.prob(j) - onehot) / tau;
        }
    }
    g
}

/// Gradient of `KL(q || p)` written as `E_q[(log q - log p) d log q]`.
fn reverse_identity(q: &TokenDist, p: &TokenDist, tau: f64) -> Vec<f64> {
    let v = q.len();
    let mut g = vec![0.0; v];
    for y in 0..v {
        let w = q.prob(y) * (q.prob(y).ln() - p.prob(y).ln());
        for (j, gj) in g.iter_mut().enumerate() {
            let onehot = if j == y { 1.0 } else { 0.0 };
            *gj += w * (onehot - q.prob(j)) / tau;
        }
    }
    g
}

fn gradient_identities() -> Outcome {
    let start = Instant::now();
    let (mut id_gap, mut fd_gap): (f64, f64) = (0.0, 0.0);
    for i in 0..100u64 {
        let mut rng = child_rng(2, &[i]);
        let v = rng.gen_range(2..=32);
        let vocab = Vocabulary::fixed_length(v).map_err(err)?;
        let tau = rng.gen_range(0.5..2.0);
        let base = NGramPolicy::random(vocab, 1, 1.5, &mut rng).map_err(err)?;
        let student = NGramPolicy::from_logits(vocab, 1, tau, base.logits().to_vec()).map_err(err)?;
        let p = NGramPolicy::random(vocab, 1, 1.5, &mut rng).map_err(err)?.dist_at(0);
        let prefix = Prefix::new(vec![rng.gen_range(0..v as Token)], vec![]);
        let ctx = student.context_of(&prefix).map_err(err)?;
        let q = student.dist_at(ctx);
        let fwd = forward_identity(&q, &p, tau);
        let rev = reverse_identity(&q, &p, tau);
        for lambda in [0.0, 0.3, 1.0] {
            let w = MixWeight::new(lambda).map_err(err)?;
            let analytic = grad_mixed_kl(&student, &p, &prefix, w).map_err(err)?;
            let row = analytic.row(ctx).ok_or("missing gradient row")?;
            let scale = row.iter().fold(1e-12f64, |m, x| m.max(x.abs()));
            for j in 0..v {
                let identity = lambda * rev[j] + (1.0 - lambda) * fwd[j];
                id_gap = id_gap.max((row[j] - identity).abs() / scale.max(1.0));
            }
            let fd = finite_diff_grad_rows(|m| mixed_kl(&p, &m.dist_at(ctx), w), &student, 1e-5, &[ctx])
                .map_err(err)?;
            fd_gap = fd_gap.max(analytic.max_abs_diff(&fd) / scale);
        }
    }
    if id_gap > 1e-12 || fd_gap > 1e-5 {
        return Err(format!("identity gap {id_gap:.3e} (tol 1e-12), FD relative gap {fd_gap:.3e} (tol 1e-5)"));
    }
    within_budget(
        start,
        Duration::from_secs(10),
        format!("100 instances, identity gap {id_gap:.3e}, FD relative gap {fd_gap:.3e}"),
    )
}

fn estimators() -> Outcome {
    let mut unbiased_gap: f64 = 0.0;
    for i in 0..1000u64 {
        let mut rng = child_rng(3, &[i]);
        let vocab = Vocabulary::fixed_length(rng.gen_range(2..=16)).map_err(err)?;
        let p = NGramPolicy::random(vocab, 1, 2.0, &mut rng).map_err(err)?.dist_at(0);
        let q = NGramPolicy::random(vocab, 1, 2.0, &mut rng).map_err(err)?.dist_at(0);
        let exact = reverse_kl(&q, &p).map_err(err)?;
        for kind in [EstimatorKind::K1, EstimatorKind::K3] {
            unbiased_gap = unbiased_gap.max((estimator_expectation(kind, &p, &q).map_err(err)? - exact).abs());
        }
    }
    let mut min_k3 = f64::INFINITY;
    for i in 0..10_000u64 {
        let mut rng = child_rng(4, &[i]);
        let vocab = Vocabulary::fixed_length(rng.gen_range(2..=16)).map_err(err)?;
        let scale = rng.gen_range(0.1..6.0);
        let p = NGramPolicy::random(vocab, 1, scale, &mut rng).map_err(err)?.dist_at(0);
        let q = NGramPolicy::random(vocab, 1, scale, &mut rng).map_err(err)?.dist_at(0);
        let y = rng.gen_range(0..vocab.size());
        min_k3 = min_k3.min(estimator_sample(EstimatorKind::K3, &p, &q, y).map_err(err)?);
    }
    // k2 bias against reverse KL as q_eps -> p along a fixed direction
    let mut rng = child_rng(5, &[0]);
    let v = 6;
    let z: Vec<f64> = (0..v).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let d: Vec<f64> = (0..v).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let p = TokenDist::softmax(&z, 1.0);
    let mut points = Vec::new();
    for e in [1e-1, 1e-2, 1e-3] {
        let zq: Vec<f64> = z.iter().zip(&d).map(|(a, b)| a + e * b).collect();
        let q = TokenDist::softmax(&zq, 1.0);
        let bias = (estimator_expectation(EstimatorKind::K2, &p, &q).map_err(err)? - reverse_kl(&q, &p).map_err(err)?).abs();
        points.push((f64::ln(e), bias.ln()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let slope = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / points.iter().map(|(x, _)| (x - mx).powi(2)).sum::<f64>();
    check(
        unbiased_gap <= 1e-12 && min_k3 >= 0.0 && slope >= 2.8,
        format!("k1/k3 bias {unbiased_gap:.3e} (tol 1e-12), min k3 {min_k3:.3e}, k2 bias slope {slope:.3} (>= 2.8)"),
    )
}

fn heads(v: usize, h: usize, seed: u64) -> Result<(HeadWeights, HeadWeights, HiddenState, HiddenState), String> {
    let mut rng = rng_from_seed(seed);
    let scale = 1.0 / (h as f64).sqrt();
    let tw = HeadWeights::random(v, h, scale, &mut rng).map_err(err)?;
    let sw = HeadWeights::random(v, h, scale, &mut rng).map_err(err)?;
    let ht = HiddenState::random(h, 1.0, &mut rng);
    let hs = HiddenState::random(h, 1.0, &mut rng);
    Ok((tw, sw, ht, hs))
}

fn fused_kernel() -> Outcome {
    let (v, h) = (151_936, 64);
    let (tw, sw, ht, hs) = heads(v, h, 6)?;
    let mut big_gap: f64 = 0.0;
    for dir in KlDirection::ALL {
        let reference = dense::kl(dir, &tw, &sw, &ht, &hs).map_err(err)?;
        let fused = fused_token_kl(dir, &tw, &sw, &ht, &hs, TileConfig::new(4096)).map_err(err)?;
        big_gap = big_gap.max((fused - reference).abs() / reference.abs());
    }

    let (tw, sw, ht, hs) = heads(1000, 16, 7)?;
    let mut tile_gap: f64 = 0.0;
    for dir in KlDirection::ALL {
        let base = fused_token_kl(dir, &tw, &sw, &ht, &hs, TileConfig::new(1000)).map_err(err)?;
        for tile in [1, 3, 64, 333, 999] {
            let other = fused_token_kl(dir, &tw, &sw, &ht, &hs, TileConfig::new(tile)).map_err(err)?;
            tile_gap = tile_gap.max((other - base).abs() / base.abs());
        }
    }

    let (tile, hidden) = (256, 32);
    let mut peaks = Vec::new();
    for vocab in [1024, 8192, 65_536] {
        for op in [ProbeOp::Lse, ProbeOp::Kl, ProbeOp::KlGrad] {
            peaks.push((vocab, op, memory_probe(op, vocab, hidden, tile, 8).map_err(err)?.peak_transient_floats));
        }
    }
    let bound = 2 * tile + 2 * hidden;
    let bounded = peaks.iter().all(|&(_, _, p)| p <= bound);
    let v_independent = peaks
        .iter()
        .all(|&(_, op, p)| peaks.iter().filter(|x| x.1 == op).all(|x| x.2 == p));

    let (v, h) = (1024, 16);
    let (tw, mut sw, ht, mut hs) = heads(v, h, 9)?;
    let fd_step = 1e-5;
    let mut grad_gap: f64 = 0.0;
    for dir in KlDirection::ALL {
        let tiles = TileConfig::new(100);
        let mut rows = vec![Vec::new(); v];
        let g = fused_token_kl_grad(dir, &tw, &sw, &ht, &hs, tiles, |i, r| rows[i] = r.to_vec()).map_err(err)?;
        let scale = g.grad_h_student.iter().fold(0f64, |m, x| m.max(x.abs()));
        for k in 0..h {
            let x = hs.0[k];
            hs.0[k] = x + fd_step;
            let plus = fused_token_kl(dir, &tw, &sw, &ht, &hs, tiles).map_err(err)?;
            hs.0[k] = x - fd_step;
            let minus = fused_token_kl(dir, &tw, &sw, &ht, &hs, tiles).map_err(err)?;
            hs.0[k] = x;
            grad_gap = grad_gap.max(((plus - minus) / (2.0 * fd_step) - g.grad_h_student[k]).abs() / scale);
        }
        let row_scale = rows.iter().flatten().fold(0f64, |m, x| m.max(x.abs()));
        for (vi, k) in [(0, 0), (17, 3), (511, 9), (1023, 15)] {
            let idx = vi * h + k;
            let x = sw.data()[idx];
            sw.data_mut()[idx] = x + fd_step;
            let plus = fused_token_kl(dir, &tw, &sw, &ht, &hs, tiles).map_err(err)?;
            sw.data_mut()[idx] = x - fd_step;
            let minus = fused_token_kl(dir, &tw, &sw, &ht, &hs, tiles).map_err(err)?;
            sw.data_mut()[idx] = x;
            grad_gap = grad_gap.max(((plus - minus) / (2.0 * fd_step) - rows[vi][k]).abs() / row_scale);
        }
    }
    check(
        big_gap <= 1e-6 && tile_gap <= 1e-9 && bounded && v_independent && grad_gap <= 1e-4,
        format!(
            "V=151936 rel gap {big_gap:.3e}, tile gap {tile_gap:.3e}, peaks <= {bound} and V-independent: {}, FD grad rel gap {grad_gap:.3e}",
            bounded && v_independent
        ),
    )
}

fn flops_golden() -> Outcome {
    let start = Instant::now();
    let summary = FlopsSummary::compute(ModelDims::QWEN3_0_6B, ModelDims::QWEN3_4B, CostQuery::REFERENCE_128).map_err(err)?;
    let golden = include_str!("golden/flops_reference.txt");
    if summary.render_text() != golden {
        return Err(format!("rendered table differs from golden file:\n{}", summary.render_text()));
    }
    let c = step_costs(&ModelDims::QWEN3_0_6B, &ModelDims::QWEN3_4B, &CostQuery::REFERENCE_128).map_err(err)?;
    let reported = [
        ("dense/token", summary.student_dense_per_token, 0.763e9, 0.02),
        ("head/token", summary.student_head_per_token, 0.311e9, 0.02),
        ("F_s", c.f_s, 7.73e12, 0.02),
        ("F_t", c.f_t, 53.13e12, 0.02),
        ("G_s", c.g_s, 7.66e12, 0.03),
        ("C_off", c.c_off_cached, 23.19e12, 0.02),
        ("C_on", c.c_on, 83.98e12, 0.02),
        ("ratio", c.ratio, 3.62, 0.02),
    ];
    let mut worst = ("", 0.0f64);
    for (name, got, want, tol) in reported {
        let rel = (got - want).abs() / want;
        if rel > tol {
            return Err(format!("{name}: {got:.4e} vs {want:.4e} (rel {rel:.3e} > {tol})"));
        }
        if rel > worst.1 {
            worst = (name, rel);
        }
    }
    within_budget(
        start,
        Duration::from_secs(1),
        format!("golden table matches, largest deviation {} at {:.2}%", worst.0, worst.1 * 100.0),
    )
}

struct NoEval;

impl Evaluator for NoEval {
    fn evaluate(&self, _: &NGramPolicy, step: usize, value: f64) -> distlab::Result<DynamicsRecord> {
        Ok(DynamicsRecord {
            step,
            accuracy: 0.0,
            mean_entropy: 0.0,
            mean_len: 0.0,
            value,
        })
    }
}

fn four_corners() -> Outcome {
    let start = Instant::now();
    let vocab = Vocabulary::fixed_length(8).map_err(err)?;
    let mut rng = rng_from_seed(42);
    let teacher = NGramPolicy::random(vocab, 1, 2.0, &mut rng).map_err(err)?;
    let init = NGramPolicy::random(vocab, 1, 0.5, &mut rng).map_err(err)?;
    let horizon = 4;
    let pool: Vec<Vec<Token>> = (0..64).map(|i| vec![(i % 8) as Token]).collect();
    let eval: Vec<Vec<Token>> = (0..8).map(|i| vec![i as Token]).collect();
    let cache =
        build_teacher_cache(&teacher, &pool, &SamplerConfig::teacher_rollouts(42), horizon, true).map_err(err)?;
    let setup = DistillSetup {
        teacher: Some(&teacher),
        cache: Some(&cache),
        prompts: &pool,
        student_sampler: SamplerConfig::default(),
    };
    let before = mean_sequence_kl(KlDirection::Forward, &teacher, &init, vocab, horizon, &eval).map_err(err)?;
    let cfg = TrainConfig {
        steps: 1000,
        batch: 8,
        seed: 42,
        eval_every: 1000,
        ..TrainConfig::default()
    };
    let mut parts = Vec::new();
    let mut ok = true;
    for source in PrefixSource::ALL {
        for dir in KlDirection::ALL {
            let spec = ObjectiveSpec::new(source, dir.as_mix(), horizon);
            let mut student = init.clone();
            train(&spec, &mut student, &setup, &cfg, None, &NoEval).map_err(err)?;
            let after = mean_sequence_kl(KlDirection::Forward, &teacher, &student, vocab, horizon, &eval).map_err(err)?;
            let reduction = 1.0 - after / before;
            ok &= reduction >= 0.9;
            parts.push(format!("{source}/{dir} {:.1}%", 100.0 * reduction));
        }
    }
    let detail = format!("forward sequence KL {before:.3} at init; reductions {}", parts.join(", "));
    if !ok {
        return Err(detail);
    }
    within_budget(start, Duration::from_secs(120), detail)
}

/// The toy pipeline used by the entropy, GRPO and determinism criteria.
fn toy_config(lambda: f64) -> Result<RunConfig, String> {
    RunConfig::from_toml_str(
        "",
        &[
            "objective.source=student".into(),
            format!("objective.lambda={lambda}"),
            "objective.horizon=64".into(),
            "eval.max_len=64".into(),
            "grpo.max_len=64".into(),
            "train.lr=5.0".into(),
            "train.seed=42".into(),
        ],
    )
    .map_err(err)
}

fn grpo_entry_entropy(cfg: &RunConfig, student: &NGramPolicy) -> Result<f64, String> {
    let ctx = RunContext::new(cfg).map_err(err)?;
    mean_rollout_entropy(student, &ctx.evaluator.prompts, &cfg.grpo.sampler(42), 1, cfg.grpo.max_len).map_err(err)
}

fn entropy_direction() -> Outcome {
    let mut final_entropy = Vec::new();
    let mut entry_entropy = Vec::new();
    for lambda in [0.0, 1.0] {
        let cfg = toy_config(lambda)?;
        let dir = tempfile::tempdir().map_err(err)?;
        let out = run_pipeline(&cfg, dir.path(), false).map_err(err)?;
        final_entropy.push(out.distill.last().ok_or("no records")?.mean_entropy);
        entry_entropy.push(grpo_entry_entropy(&cfg, &out.student)?);
    }
    check(
        final_entropy[1] < final_entropy[0] && entry_entropy[0] > entry_entropy[1],
        format!(
            "final entropy lambda=1 {:.4} vs lambda=0 {:.4}; GRPO entry entropy lambda=0 {:.4} vs lambda=1 {:.4}",
            final_entropy[1], final_entropy[0], entry_entropy[0], entry_entropy[1]
        ),
    )
}

fn curriculum() -> Outcome {
    let start = Instant::now();
    let hand = CurriculumConfig {
        horizons: vec![128, 256, 512, 1024],
        h_min: 0.5,
        on_fail: OnFail::HoldAtLastStable,
        check_interval: 1,
    };
    let (state, _) = simulate(&hand, &[0.9, 0.8, 0.4]).map_err(err)?;
    if state.current_horizon(&hand) != 512 || state.status() != CurriculumStatus::Frozen {
        return Err(format!("hand trace ended at {} ({:?})", state.current_horizon(&hand), state.status()));
    }
    for i in 0..1000u64 {
        let mut rng = child_rng(10, &[i]);
        let rungs = rng.gen_range(1..=8);
        let mut horizons = Vec::new();
        let mut h = 0;
        for _ in 0..rungs {
            h += rng.gen_range(1..100);
            horizons.push(h);
        }
        let cfg = CurriculumConfig {
            horizons,
            h_min: rng.gen_range(0.0..1.0),
            on_fail: if rng.gen_bool(0.5) { OnFail::Terminate } else { OnFail::HoldAtLastStable },
            check_interval: 1,
        };
        let series: Vec<f64> = (0..rng.gen_range(0..20)).map(|_| rng.gen_range(0.0..1.2)).collect();
        let (state, trace) = simulate(&cfg, &series).map_err(err)?;
        let mut last = cfg.horizons[0];
        for (k, e) in trace.iter().enumerate() {
            let open = e.entropy >= cfg.h_min;
            let sound = match e.decision {
                Decision::Advance | Decision::Hold => open,
                Decision::Freeze | Decision::Terminate => !open,
            };
            let stopping = matches!(e.decision, Decision::Freeze | Decision::Terminate);
            if !sound || e.horizon_after < last || (stopping && k + 1 != trace.len()) {
                return Err(format!("series {i}: bad decision {:?} at reading {k}", e.decision));
            }
            last = e.horizon_after;
        }
        if trace.len() < series.len() && state.status() == CurriculumStatus::Running {
            return Err(format!("series {i}: readings dropped while running"));
        }
    }
    within_budget(start, Duration::from_secs(1), "hand trace freezes at 512; 1000 random series sound and monotone".into())
}

fn grpo_sanity() -> Outcome {
    let start = Instant::now();
    let task = ToyTask::new(TaskKind::ModSum, 8, 2).map_err(err)?;
    let cfg = GrpoConfig::default();
    // every reward 0: eos first, always
    let mut logits = vec![0.0; NGramPolicy::zeros(task.vocab(), 2).map_err(err)?.n_params()];
    for row in logits.chunks_mut(8) {
        row[7] = 200.0;
    }
    let mut silent = NGramPolicy::from_logits(task.vocab(), 2, 1.0, logits).map_err(err)?;
    let before = silent.clone();
    let r = grpo_step(&mut silent, &task, &cfg, &task.all_prompts(), 3).map_err(err)?;
    let zero_update = r.groups_used == 0 && r.grad_norm == 0.0 && silent == before;

    let mut rewards = [0.0; 8];
    rewards[0] = 1.0;
    let exact = group_advantages(&rewards, 0.0).ok_or("degenerate")?;
    let with_eps = group_advantages(&rewards, cfg.advantage_epsilon).ok_or("degenerate")?;
    let s7 = 7f64.sqrt();
    let adv_gap = exact
        .iter()
        .enumerate()
        .map(|(i, a)| (a - if i == 0 { s7 } else { -1.0 / s7 }).abs())
        .fold(0.0, f64::max);
    let eps_gap = exact.iter().zip(&with_eps).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let dcfg = toy_config(1.0)?;
    let dir = tempfile::tempdir().map_err(err)?;
    let mut student = run_pipeline(&dcfg, dir.path(), false).map_err(err)?.student;
    let ctx = RunContext::new(&dcfg).map_err(err)?;
    let initial = ctx.evaluator.stats(&student).map_err(err)?.accuracy;
    let mut gcfg = dcfg.grpo;
    gcfg.steps = 200;
    let records = run_grpo(&mut student, &ctx.task, &gcfg, &ctx.train_prompts, &ctx.evaluator, 42).map_err(err)?;
    let fin = records.last().ok_or("no GRPO records")?.accuracy;
    let detail = format!(
        "zero-variance update is zero: {zero_update}; advantage gap {adv_gap:.1e} (eps shift {eps_gap:.1e}); accuracy {initial:.3} -> {fin:.3} over 200 steps"
    );
    if !(zero_update && adv_gap <= 1e-15 && eps_gap <= 1e-7 && fin > initial) {
        return Err(detail);
    }
    within_budget(start, Duration::from_secs(120), detail)
}

fn read_tree(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let mut configs = vec![toy_config(0.0)?, toy_config(1.0)?];
    configs.push(
        RunConfig::from_toml_str(
            "",
            &[
                "objective.source=teacher".into(),
                "objective.lambda=0.5".into(),
                "train.lr=5.0".into(),
                "train.seed=7".into(),
                "curriculum.horizons=[2, 4, 8]".into(),
                "curriculum.h_min=0.3".into(),
                "curriculum.check_interval=25".into(),
            ],
        )
        .map_err(err)?,
    );
    let mut files = 0;
    for (i, cfg) in configs.iter().enumerate() {
        let a = tempfile::tempdir().map_err(err)?;
        let b = tempfile::tempdir().map_err(err)?;
        run_pipeline(cfg, a.path(), true).map_err(err)?;
        run_pipeline(cfg, b.path(), true).map_err(err)?;
        let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
        if ta != tb {
            return Err(format!("config {i}: artifacts differ between runs"));
        }
        files += ta.len();
    }
    check(true, format!("{} configs, {files} artifact files byte-identical across re-runs", configs.len()))
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 10] = [
        ("sequence KL decomposition", decomposition),
        ("KL gradient identities", gradient_identities),
        ("reverse KL estimators", estimators),
        ("fused vocabulary kernel", fused_kernel),
        ("FLOPs golden table", flops_golden),
        ("four-corner distillation", four_corners),
        ("reverse KL lowers entropy", entropy_direction),
        ("curriculum state machine", curriculum),
        ("GRPO sanity", grpo_sanity),
        ("pipeline determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {:>2} PASS {name} [{secs:.2}s]: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name} [{secs:.2}s]: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
