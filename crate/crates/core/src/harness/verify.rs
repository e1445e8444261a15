//! Fast invariant suite behind the `verify` command.

use crate::error::Result;
use crate::flops::{step_costs, CostQuery, ModelDims};
use crate::fused_kl::{dense, fused_token_kl, HeadWeights, HiddenState, TileConfig};
use crate::grad::{finite_diff_grad, grad_forward_kl, grad_reverse_kl, reinforce_grad_estimate, ReinforceConfig};
use crate::kl::{estimator_expectation, forward_kl, reverse_kl, EstimatorKind, KlDirection};
use crate::policy::{NGramPolicy, Prefix, TokenDist, Vocabulary};
use crate::rng::child_rng;
use crate::seq_kl::{decomposition_check, EnumerationSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyLine {
    pub name: String,
    /// Largest observed discrepancy.
    pub gap: f64,
    pub tolerance: f64,
}

impl VerifyLine {
    pub fn passed(&self) -> bool {
        self.gap <= self.tolerance
    }

    pub fn render(&self) -> String {
        format!(
            "{:<34} gap={:.3e} tol={:.1e} {}",
            self.name,
            self.gap,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub lines: Vec<VerifyLine>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(VerifyLine::passed)
    }

    pub fn render(&self) -> String {
        self.lines.iter().map(|l| l.render() + "\n").collect()
    }
}

/// Fixed-format chain-rule check for one seeded pair of random policies.
pub fn decomposition_report(vocab_size: usize, order: usize, length: usize, seed: u64) -> Result<String> {
    let vocab = Vocabulary::fixed_length(vocab_size)?;
    let mut rng = child_rng(seed, &[0]);
    let teacher = NGramPolicy::random(vocab, order, 1.0, &mut rng)?;
    let student = NGramPolicy::random(vocab, order, 1.0, &mut rng)?;
    let spec = EnumerationSpec::new(vocab, length, vec![0]);
    let mut out = String::from("direction  lhs                     rhs                     gap\n");
    for dir in KlDirection::ALL {
        let r = decomposition_check(dir, &teacher, &student, &spec)?;
        out.push_str(&format!("{:<9}  {:.16e}  {:.16e}  {:.3e}\n", dir.to_string(), r.lhs, r.rhs, r.gap));
    }
    Ok(out)
}

fn line(name: &str, gap: f64, tolerance: f64) -> VerifyLine {
    VerifyLine {
        name: name.to_string(),
        gap,
        tolerance,
    }
}

/// Runs every check on instances derived from `seed`.
pub fn run_verify(seed: u64) -> Result<VerifyReport> {
    let mut lines = Vec::new();

    let mut gap: f64 = 0.0;
    for i in 0..10u64 {
        let mut rng = child_rng(seed, &[1, i]);
        let eos = if i % 2 == 0 { None } else { Some(2) };
        let vocab = Vocabulary::new(3, eos)?;
        let t = NGramPolicy::random(vocab, 1 + (i as usize % 2), 1.0, &mut rng)?;
        let s = NGramPolicy::random(vocab, 1 + (i as usize % 2), 1.0, &mut rng)?;
        let spec = EnumerationSpec::new(vocab, 4, vec![0]);
        for dir in KlDirection::ALL {
            gap = gap.max(decomposition_check(dir, &t, &s, &spec)?.gap);
        }
    }
    lines.push(line("sequence KL chain rule", gap, 1e-10));

    let (mut fwd_gap, mut rev_gap, mut pg_gap) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..10u64 {
        let mut rng = child_rng(seed, &[2, i]);
        let vocab = Vocabulary::fixed_length(4)?;
        let student = NGramPolicy::random(vocab, 1, 1.0, &mut rng)?;
        let p = NGramPolicy::random(vocab, 1, 1.0, &mut rng)?.dist_at(0);
        let prefix = Prefix::new(vec![1], vec![]);
        let ctx = student.context_of(&prefix)?;
        let fwd = grad_forward_kl(&student, &p, &prefix)?;
        let rev = grad_reverse_kl(&student, &p, &prefix)?;
        let fd_f = finite_diff_grad(|m| forward_kl(&p, &m.dist_at(ctx)), &student, 1e-5)?;
        let fd_r = finite_diff_grad(|m| reverse_kl(&m.dist_at(ctx), &p), &student, 1e-5)?;
        let scale = fwd.max_abs().max(rev.max_abs()).max(1e-12);
        fwd_gap = fwd_gap.max(fwd.max_abs_diff(&fd_f) / scale);
        rev_gap = rev_gap.max(rev.max_abs_diff(&fd_r) / scale);
        let pg = reinforce_grad_estimate(&student, &p, &prefix, &ReinforceConfig::enumerate())?;
        pg_gap = pg_gap.max(pg.scaled(-1.0).max_abs_diff(&rev));
    }
    lines.push(line("forward KL gradient vs FD", fwd_gap, 1e-5));
    lines.push(line("reverse KL gradient vs FD", rev_gap, 1e-5));
    lines.push(line("log-ratio policy gradient", pg_gap, 1e-12));

    let (mut k1_gap, mut k3_gap) = (0.0f64, 0.0f64);
    for i in 0..10u64 {
        let mut rng = child_rng(seed, &[3, i]);
        let vocab = Vocabulary::fixed_length(6)?;
        let p: TokenDist = NGramPolicy::random(vocab, 1, 1.5, &mut rng)?.dist_at(0);
        let q: TokenDist = NGramPolicy::random(vocab, 1, 1.5, &mut rng)?.dist_at(0);
        let exact = reverse_kl(&q, &p)?;
        k1_gap = k1_gap.max((estimator_expectation(EstimatorKind::K1, &p, &q)? - exact).abs());
        k3_gap = k3_gap.max((estimator_expectation(EstimatorKind::K3, &p, &q)? - exact).abs());
    }
    lines.push(line("k1 expectation = reverse KL", k1_gap, 1e-12));
    lines.push(line("k3 expectation = reverse KL", k3_gap, 1e-12));

    let mut rng = child_rng(seed, &[4]);
    let (v, h) = (4096, 32);
    let tw = HeadWeights::random(v, h, 0.2, &mut rng)?;
    let sw = HeadWeights::random(v, h, 0.2, &mut rng)?;
    let ht = HiddenState::random(h, 1.0, &mut rng);
    let hs = HiddenState::random(h, 1.0, &mut rng);
    let mut kgap: f64 = 0.0;
    for dir in KlDirection::ALL {
        let reference = dense::kl(dir, &tw, &sw, &ht, &hs)?;
        for tile in [1, 100, 256, 4096] {
            let fused = fused_token_kl(dir, &tw, &sw, &ht, &hs, TileConfig::new(tile))?;
            kgap = kgap.max((fused - reference).abs() / reference.abs().max(1e-300));
        }
    }
    lines.push(line("fused KL vs dense", kgap, 1e-6));

    let c = step_costs(&ModelDims::QWEN3_0_6B, &ModelDims::QWEN3_4B, &CostQuery::REFERENCE_128)?;
    lines.push(line("cost ratio near 3.6", (c.ratio - 3.6).abs() / 3.6, 0.03));

    Ok(VerifyReport { lines })
}
