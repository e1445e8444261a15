//! Exact logit gradients of token-level losses for tabular softmax policies,
//! the REINFORCE estimator with the log-ratio reward, and a central
//! finite-difference oracle.
//!
//! Sign convention: every `grad_*` function returns the descent gradient of
//! the named loss. [`reinforce_grad_estimate`] returns the ascent direction of
//! the expected log-ratio reward, whose expectation is `-grad_reverse_kl`.
//!
//! With `q = softmax(z / tau)` the score is `d log q(y) / dz = (e_y - q) / tau`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kl::MixWeight;
use crate::policy::{NGramPolicy, Prefix, TokenDist};
use crate::rng::rng_from_seed;

/// Gradient with the shape of an [`NGramPolicy`] logit table. Only rows that
/// received a contribution are stored; absent rows are zero.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradTable {
    vocab: usize,
    n_contexts: usize,
    rows: BTreeMap<usize, Vec<f64>>,
}

impl GradTable {
    pub fn zeros_like(policy: &NGramPolicy) -> Self {
        Self {
            vocab: policy.vocab_size(),
            n_contexts: policy.n_contexts(),
            rows: BTreeMap::new(),
        }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn n_contexts(&self) -> usize {
        self.n_contexts
    }

    pub fn row(&self, context: usize) -> Option<&[f64]> {
        self.rows.get(&context).map(Vec::as_slice)
    }

    pub fn get(&self, context: usize, token: usize) -> f64 {
        self.rows.get(&context).map_or(0.0, |r| r[token])
    }

    /// Contexts carrying an explicit row, in increasing order.
    pub fn active_contexts(&self) -> impl Iterator<Item = usize> + '_ {
        self.rows.keys().copied()
    }

    pub fn rows(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.rows.iter().map(|(&c, r)| (c, r.as_slice()))
    }

    pub fn row_mut(&mut self, context: usize) -> &mut [f64] {
        debug_assert!(context < self.n_contexts);
        let v = self.vocab;
        self.rows.entry(context).or_insert_with(|| vec![0.0; v])
    }

    pub fn add_row_scaled(&mut self, context: usize, values: &[f64], scale: f64) {
        for (g, v) in self.row_mut(context).iter_mut().zip(values) {
            *g += scale * v;
        }
    }

    pub fn add_scaled(&mut self, other: &GradTable, scale: f64) {
        for (c, r) in other.rows() {
            self.add_row_scaled(c, r, scale);
        }
    }

    pub fn scaled(mut self, scale: f64) -> Self {
        self.rows.values_mut().flatten().for_each(|g| *g *= scale);
        self
    }

    pub fn norm(&self) -> f64 {
        self.rows.values().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.rows.values().flatten().fold(0.0, |m, g| m.max(g.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.rows.values().flatten().all(|&g| g == 0.0)
    }

    /// Largest absolute entry-wise difference over all parameters.
    pub fn max_abs_diff(&self, other: &GradTable) -> f64 {
        let mut diff = self.clone();
        diff.add_scaled(other, -1.0);
        diff.max_abs()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_contexts * self.vocab];
        for (c, r) in self.rows() {
            out[c * self.vocab..(c + 1) * self.vocab].copy_from_slice(r);
        }
        out
    }

    /// `logits -= lr * grad`.
    pub fn apply_descent(&self, policy: &mut NGramPolicy, lr: f64) {
        for (c, r) in self.rows() {
            for (z, g) in policy.row_mut(c).iter_mut().zip(r) {
                *z -= lr * g;
            }
        }
    }

    fn single_row(policy: &NGramPolicy, context: usize, row: Vec<f64>) -> Self {
        let mut g = Self::zeros_like(policy);
        g.rows.insert(context, row);
        g
    }
}

fn check_shapes(student: &NGramPolicy, teacher: &TokenDist) -> Result<()> {
    if student.vocab_size() == teacher.len() {
        Ok(())
    } else {
        Err(Error::LengthMismatch {
            expected: student.vocab_size(),
            actual: teacher.len(),
        })
    }
}

/// Forward-KL logit gradient for one row: `(q - p) / tau`.
pub(crate) fn forward_row(q: &TokenDist, p: &TokenDist, tau: f64) -> Vec<f64> {
    q.probs().iter().zip(p.probs()).map(|(qi, pi)| (qi - pi) / tau).collect()
}

/// Reverse-KL logit gradient for one row, from the score-function form
/// `sum_y q(y) (log q(y) - log p(y)) (e_y - q) / tau`. The extra term
/// `sum_y q(y) grad log q(y)` vanishes because `q` sums to one.
pub(crate) fn reverse_row(q: &TokenDist, p: &TokenDist, tau: f64) -> Result<Vec<f64>> {
    let mut weights = Vec::with_capacity(q.len());
    for (y, (&qy, &py)) in q.probs().iter().zip(p.probs()).enumerate() {
        if qy > 0.0 {
            if py <= 0.0 {
                return Err(Error::InfiniteDivergence { token: y });
            }
            weights.push(qy * (qy.ln() - py.ln()));
        } else {
            weights.push(0.0);
        }
    }
    let total: f64 = weights.iter().sum();
    Ok(weights
        .iter()
        .zip(q.probs())
        .map(|(w, qj)| (w - qj * total) / tau)
        .collect())
}

/// `lambda * reverse + (1 - lambda) * forward`; endpoints evaluate one side only.
pub(crate) fn mixed_row(q: &TokenDist, p: &TokenDist, tau: f64, lambda: MixWeight) -> Result<Vec<f64>> {
    let l = lambda.value();
    if l == 0.0 {
        return Ok(forward_row(q, p, tau));
    }
    let rev = reverse_row(q, p, tau)?;
    if l == 1.0 {
        return Ok(rev);
    }
    let fwd = forward_row(q, p, tau);
    Ok(rev.iter().zip(&fwd).map(|(r, f)| l * r + (1.0 - l) * f).collect())
}

/// Descent gradient of `KL(p_T || q_theta)` at `prefix`.
pub fn grad_forward_kl(student: &NGramPolicy, teacher_dist: &TokenDist, prefix: &Prefix) -> Result<GradTable> {
    check_shapes(student, teacher_dist)?;
    let ctx = student.context_of(prefix)?;
    let q = student.dist_at(ctx);
    Ok(GradTable::single_row(student, ctx, forward_row(&q, teacher_dist, student.temperature())))
}

/// Descent gradient of `KL(q_theta || p_T)` at `prefix`.
pub fn grad_reverse_kl(student: &NGramPolicy, teacher_dist: &TokenDist, prefix: &Prefix) -> Result<GradTable> {
    check_shapes(student, teacher_dist)?;
    let ctx = student.context_of(prefix)?;
    let q = student.dist_at(ctx);
    Ok(GradTable::single_row(student, ctx, reverse_row(&q, teacher_dist, student.temperature())?))
}

/// Descent gradient of the mixed objective at `prefix`.
pub fn grad_mixed_kl(
    student: &NGramPolicy,
    teacher_dist: &TokenDist,
    prefix: &Prefix,
    lambda: MixWeight,
) -> Result<GradTable> {
    check_shapes(student, teacher_dist)?;
    let ctx = student.context_of(prefix)?;
    let q = student.dist_at(ctx);
    Ok(GradTable::single_row(
        student,
        ctx,
        mixed_row(&q, teacher_dist, student.temperature(), lambda)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    #[default]
    None,
    /// Subtract the mean reward. Exact mode uses `E_q[r]`; sampled mode uses
    /// the leave-one-out mean of the other samples so the estimate stays unbiased.
    MeanReward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Weight every token by `q(y)` instead of sampling.
    Enumerate,
    Sample(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReinforceConfig {
    pub samples: SampleMode,
    pub baseline: Baseline,
    pub seed: u64,
}

impl ReinforceConfig {
    pub fn sampled(n_samples: usize, seed: u64) -> Self {
        Self {
            samples: SampleMode::Sample(n_samples),
            baseline: Baseline::None,
            seed,
        }
    }

    pub fn enumerate() -> Self {
        Self {
            samples: SampleMode::Enumerate,
            baseline: Baseline::None,
            seed: 0,
        }
    }

    pub fn with_baseline(self, baseline: Baseline) -> Self {
        Self { baseline, ..self }
    }
}

/// REINFORCE estimate of `E_{y~q}[r(y) grad log q(y)]` with the dense reward
/// `r(y) = log p_T(y) - log q(y)` held fixed under differentiation.
pub fn reinforce_grad_estimate(
    student: &NGramPolicy,
    teacher_dist: &TokenDist,
    prefix: &Prefix,
    cfg: &ReinforceConfig,
) -> Result<GradTable> {
    check_shapes(student, teacher_dist)?;
    let ctx = student.context_of(prefix)?;
    let q = student.dist_at(ctx);
    let tau = student.temperature();
    let v = q.len();

    let reward = |y: usize| -> Result<f64> {
        let (py, qy) = (teacher_dist.prob(y), q.prob(y));
        if py <= 0.0 {
            return Err(Error::InfiniteDivergence { token: y });
        }
        Ok(py.ln() - qy.ln())
    };
    // sum_i w_i (e_{y_i} - q) / tau, accumulated as per-token weights
    let mut token_weight = vec![0.0; v];
    match cfg.samples {
        SampleMode::Enumerate => {
            let mut rewards = vec![0.0; v];
            for y in (0..v).filter(|&y| q.prob(y) > 0.0) {
                rewards[y] = reward(y)?;
            }
            let b = match cfg.baseline {
                Baseline::None => 0.0,
                Baseline::MeanReward => (0..v).map(|y| q.prob(y) * rewards[y]).sum(),
            };
            for y in 0..v {
                token_weight[y] = q.prob(y) * (rewards[y] - b);
            }
        }
        SampleMode::Sample(n) => {
            if n == 0 {
                return Err(Error::Config("n_samples must be >= 1".into()));
            }
            let mut rng = rng_from_seed(cfg.seed);
            let draws: Vec<usize> = (0..n).map(|_| q.sample(&mut rng) as usize).collect();
            let rewards = draws.iter().map(|&y| reward(y)).collect::<Result<Vec<_>>>()?;
            let total: f64 = rewards.iter().sum();
            for (&y, &r) in draws.iter().zip(&rewards) {
                let b = match cfg.baseline {
                    Baseline::MeanReward if n > 1 => (total - r) / (n - 1) as f64,
                    _ => 0.0,
                };
                token_weight[y] += (r - b) / n as f64;
            }
        }
    }
    let mass: f64 = token_weight.iter().sum();
    let row = (0..v).map(|j| (token_weight[j] - q.prob(j) * mass) / tau).collect();
    Ok(GradTable::single_row(student, ctx, row))
}

/// Central differences `(L(theta + h e_i) - L(theta - h e_i)) / 2h` over every
/// parameter of `student`.
pub fn finite_diff_grad<F>(loss_fn: F, student: &NGramPolicy, h: f64) -> Result<GradTable>
where
    F: Fn(&NGramPolicy) -> Result<f64>,
{
    let rows: Vec<usize> = (0..student.n_contexts()).collect();
    finite_diff_grad_rows(loss_fn, student, h, &rows)
}

/// [`finite_diff_grad`] restricted to the listed context rows.
pub fn finite_diff_grad_rows<F>(loss_fn: F, student: &NGramPolicy, h: f64, rows: &[usize]) -> Result<GradTable>
where
    F: Fn(&NGramPolicy) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let eval = |p: &NGramPolicy| -> Result<f64> {
        let l = loss_fn(p)?;
        if l.is_finite() {
            Ok(l)
        } else {
            Err(Error::NonFinite(format!("loss evaluated to {l}")))
        }
    };
    let mut work = student.clone();
    let mut grad = GradTable::zeros_like(student);
    let v = student.vocab_size();
    for &ctx in rows {
        let mut row = vec![0.0; v];
        for (tok, slot) in row.iter_mut().enumerate() {
            let orig = work.row(ctx)[tok];
            work.row_mut(ctx)[tok] = orig + h;
            let up = eval(&work)?;
            work.row_mut(ctx)[tok] = orig - h;
            let down = eval(&work)?;
            work.row_mut(ctx)[tok] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        grad.rows.insert(ctx, row);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kl::{forward_kl, mixed_kl, reverse_kl};
    use crate::policy::Vocabulary;
    use crate::rng::rng_from_seed;

    fn pair(v: usize, order: usize, seed: u64) -> (NGramPolicy, NGramPolicy) {
        let mut rng = rng_from_seed(seed);
        let vocab = Vocabulary::fixed_length(v).unwrap();
        let teacher = NGramPolicy::random(vocab, order, 1.5, &mut rng).unwrap();
        let student = NGramPolicy::random(vocab, order, 1.5, &mut rng).unwrap();
        (teacher, student)
    }

    fn rel_err(a: &GradTable, b: &GradTable) -> f64 {
        a.max_abs_diff(b) / b.max_abs().max(1e-12)
    }

    #[test]
    fn equal_policies_have_zero_gradients() {
        let (teacher, _) = pair(6, 1, 1);
        let prefix = Prefix::prompt_only(vec![2]);
        let p = teacher.token_dist(&prefix).unwrap();
        assert!(grad_forward_kl(&teacher, &p, &prefix).unwrap().max_abs() < 1e-15);
        assert!(grad_reverse_kl(&teacher, &p, &prefix).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn forward_gradient_matches_finite_differences() {
        let (teacher, student) = pair(8, 1, 11);
        let prefix = Prefix::prompt_only(vec![3]);
        let p = teacher.token_dist(&prefix).unwrap();
        let g = grad_forward_kl(&student, &p, &prefix).unwrap();
        let fd = finite_diff_grad(|s| forward_kl(&p, &s.token_dist(&prefix)?), &student, 1e-5).unwrap();
        assert!(rel_err(&g, &fd) < 1e-6, "{}", rel_err(&g, &fd));
        let ctx = student.context_of(&prefix).unwrap();
        assert_close!(g.row(ctx).unwrap().iter().sum::<f64>(), 0.0, 1e-15);
        assert_eq!(g.active_contexts().collect::<Vec<_>>(), vec![ctx]);
    }

    #[test]
    fn reverse_gradient_matches_finite_differences_and_expanded_form() {
        let (teacher, student) = pair(8, 1, 12);
        let prefix = Prefix::prompt_only(vec![5]);
        let p = teacher.token_dist(&prefix).unwrap();
        let g = grad_reverse_kl(&student, &p, &prefix).unwrap();
        let fd = finite_diff_grad(|s| reverse_kl(&s.token_dist(&prefix)?, &p), &student, 1e-5).unwrap();
        assert!(rel_err(&g, &fd) < 1e-6, "{}", rel_err(&g, &fd));

        // d/dz_j sum_y q_y (log q_y - log p_y) expanded by the chain rule:
        // sum_y (dq_y/dz_j) (log q_y - log p_y + 1), dq_y/dz_j = q_y (delta_yj - q_j)
        let q = student.token_dist(&prefix).unwrap();
        let ctx = student.context_of(&prefix).unwrap();
        for j in 0..8 {
            let mut expect = 0.0;
            for y in 0..8 {
                let dq = q.prob(y) * (if y == j { 1.0 } else { 0.0 } - q.prob(j));
                expect += dq * (q.prob(y).ln() - p.prob(y).ln() + 1.0);
            }
            assert_close!(g.get(ctx, j), expect, 1e-14);
        }
    }

    #[test]
    fn mixed_gradient_endpoints_and_interior() {
        let (teacher, student) = pair(8, 1, 13);
        let prefix = Prefix::prompt_only(vec![0]);
        let p = teacher.token_dist(&prefix).unwrap();
        let fwd = grad_forward_kl(&student, &p, &prefix).unwrap();
        let rev = grad_reverse_kl(&student, &p, &prefix).unwrap();
        assert_eq!(grad_mixed_kl(&student, &p, &prefix, MixWeight::FORWARD).unwrap(), fwd);
        assert_eq!(grad_mixed_kl(&student, &p, &prefix, MixWeight::REVERSE).unwrap(), rev);
        let lambda = MixWeight::new(0.3).unwrap();
        let g = grad_mixed_kl(&student, &p, &prefix, lambda).unwrap();
        let fd = finite_diff_grad(|s| mixed_kl(&p, &s.token_dist(&prefix)?, lambda), &student, 1e-5).unwrap();
        assert!(rel_err(&g, &fd) < 1e-6);
    }

    #[test]
    fn temperature_scales_gradients() {
        let (teacher, student) = pair(5, 1, 21);
        let student =
            NGramPolicy::from_logits(*student.vocab(), 1, 0.7, student.logits().to_vec()).unwrap();
        let prefix = Prefix::prompt_only(vec![1]);
        let p = teacher.token_dist(&prefix).unwrap();
        for lambda in [0.0, 0.6, 1.0] {
            let lambda = MixWeight::new(lambda).unwrap();
            let g = grad_mixed_kl(&student, &p, &prefix, lambda).unwrap();
            let fd = finite_diff_grad(|s| mixed_kl(&p, &s.token_dist(&prefix)?, lambda), &student, 1e-5).unwrap();
            assert!(rel_err(&g, &fd) < 1e-6);
        }
    }

    #[test]
    fn reinforce_enumeration_is_negated_reverse_gradient() {
        let (teacher, student) = pair(7, 2, 14);
        let prefix = Prefix::new(vec![1], vec![4]);
        let p = teacher.token_dist(&prefix).unwrap();
        let rev = grad_reverse_kl(&student, &p, &prefix).unwrap();
        let exact = reinforce_grad_estimate(&student, &p, &prefix, &ReinforceConfig::enumerate()).unwrap();
        assert!(exact.max_abs_diff(&rev.clone().scaled(-1.0)) < 1e-15);
        let with_baseline = reinforce_grad_estimate(
            &student,
            &p,
            &prefix,
            &ReinforceConfig::enumerate().with_baseline(Baseline::MeanReward),
        )
        .unwrap();
        assert!(with_baseline.max_abs_diff(&exact) < 1e-15);
    }

    #[test]
    fn reinforce_is_zero_in_expectation_at_the_optimum() {
        let (teacher, _) = pair(6, 1, 15);
        let prefix = Prefix::prompt_only(vec![2]);
        let p = teacher.token_dist(&prefix).unwrap();
        let exact = reinforce_grad_estimate(&teacher, &p, &prefix, &ReinforceConfig::enumerate()).unwrap();
        assert!(exact.max_abs() < 1e-15);
        // rewards are identically zero, so every sample is zero too
        let sampled = reinforce_grad_estimate(&teacher, &p, &prefix, &ReinforceConfig::sampled(100, 3)).unwrap();
        assert!(sampled.max_abs() < 1e-15);
    }

    #[test]
    fn reinforce_sample_count_must_be_positive() {
        let (teacher, student) = pair(4, 1, 16);
        let prefix = Prefix::prompt_only(vec![0]);
        let p = teacher.token_dist(&prefix).unwrap();
        assert!(reinforce_grad_estimate(&student, &p, &prefix, &ReinforceConfig::sampled(0, 1)).is_err());
    }

    #[test]
    fn reverse_gradient_reports_teacher_zero() {
        let (_, student) = pair(3, 0, 17);
        let p = TokenDist::new(vec![0.5, 0.5, 0.0]).unwrap();
        let err = grad_reverse_kl(&student, &p, &Prefix::prompt_only(vec![])).unwrap_err();
        assert!(matches!(err, Error::InfiniteDivergence { token: 2 }));
    }

    #[test]
    fn finite_differences_of_a_quadratic() {
        let (_, student) = pair(4, 1, 18);
        let fd = finite_diff_grad(|s| Ok(s.logits().iter().map(|z| z * z).sum()), &student, 1e-3).unwrap();
        for (g, z) in fd.to_dense().iter().zip(student.logits()) {
            assert_close!(*g, 2.0 * z, 1e-9);
        }
    }

    #[test]
    fn finite_difference_error_is_second_order() {
        // a smooth non-polynomial loss: log-sum-exp of the first row, cubed
        let (_, student) = pair(4, 0, 19);
        let loss = |s: &NGramPolicy| -> Result<f64> {
            let lse = s.row(0).iter().map(|z| z.exp()).sum::<f64>().ln();
            Ok(lse.powi(3))
        };
        let lse = student.row(0).iter().map(|z| z.exp()).sum::<f64>().ln();
        let q = student.dist_at(0);
        let exact: Vec<f64> = q.probs().iter().map(|qi| 3.0 * lse * lse * qi).collect();
        let err = |h: f64| {
            let fd = finite_diff_grad(loss, &student, h).unwrap();
            fd.row(0).unwrap().iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let ratio = err(2e-2) / err(1e-2);
        assert!((3.6..4.4).contains(&ratio), "error ratio {ratio}");
    }

    #[test]
    fn finite_differences_reject_bad_inputs() {
        let (_, student) = pair(3, 0, 20);
        assert!(finite_diff_grad(|_| Ok(0.0), &student, 0.0).is_err());
        assert!(matches!(
            finite_diff_grad(|_| Ok(f64::NAN), &student, 1e-3),
            Err(Error::NonFinite(_))
        ));
    }
}
