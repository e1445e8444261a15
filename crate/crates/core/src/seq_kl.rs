//! Brute-force sequence-level KL and prefix (state) distributions.
//!
//! Sequences are enumerated in fixed-length mode: every `y in V^T` is visited
//! and its probability is the product of the policy's conditionals. When the
//! vocabulary has an eos token, positions after eos are absorbing: both
//! policies emit eos with probability one, contributing nothing to any KL.
//!
//! The token-level decomposition pairs each direction with its own state
//! distribution:
//!
//! ```text
//! KL(p_T(.|x) || q(.|x)) = sum_t E_{s_t ~ d_T^t} KL(p_T(.|s_t) || q(.|s_t))
//! KL(q(.|x) || p_T(.|x)) = sum_t E_{s_t ~ d_S^t} KL(q(.|s_t) || p_T(.|s_t))
//! ```
//!
//! [`decomposition_check`] evaluates both sides by independent enumerations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kl::{directed_kl, KlDirection};
use crate::policy::{NGramPolicy, Token, TokenDist, Vocabulary};

pub const DEFAULT_ENUMERATION_BUDGET: u64 = 1_000_000;

/// Which policy generates the prefixes a loss is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrefixSource {
    /// Off-policy: states visited by teacher rollouts.
    Teacher,
    /// On-policy: states visited by student rollouts.
    Student,
}

impl PrefixSource {
    pub const ALL: [PrefixSource; 2] = [PrefixSource::Teacher, PrefixSource::Student];
}

impl std::fmt::Display for PrefixSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PrefixSource::Teacher => "teacher",
            PrefixSource::Student => "student",
        })
    }
}

impl std::str::FromStr for PrefixSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" | "off-policy" => Ok(PrefixSource::Teacher),
            "student" | "on-policy" => Ok(PrefixSource::Student),
            other => Err(Error::Config(format!("unknown prefix source `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnumerationSpec {
    pub vocab: Vocabulary,
    /// Fixed response length `T`.
    pub length: usize,
    pub prompt: Vec<Token>,
    /// Maximum number of sequences an enumeration may visit.
    pub budget: u64,
}

impl EnumerationSpec {
    pub fn new(vocab: Vocabulary, length: usize, prompt: Vec<Token>) -> Self {
        Self {
            vocab,
            length,
            prompt,
            budget: DEFAULT_ENUMERATION_BUDGET,
        }
    }

    pub fn with_budget(self, budget: u64) -> Self {
        Self { budget, ..self }
    }

    fn check(&self, depth: usize, policies: &[&NGramPolicy]) -> Result<()> {
        if self.length == 0 {
            return Err(Error::Config("enumeration length must be >= 1".into()));
        }
        self.vocab.check_all(&self.prompt)?;
        for p in policies {
            if p.vocab() != &self.vocab {
                return Err(Error::Config("policy vocabulary differs from the enumeration vocabulary".into()));
            }
        }
        let required = (self.vocab.size() as u128).saturating_pow(depth as u32);
        if required > self.budget as u128 {
            return Err(Error::BudgetExceeded {
                required,
                budget: self.budget,
            });
        }
        Ok(())
    }
}

/// A distribution over step-`t` states `(x, y_<t)`; keys are the generated parts.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixDistribution {
    pub step: usize,
    pub weights: BTreeMap<Vec<Token>, f64>,
}

impl PrefixDistribution {
    pub fn total(&self) -> f64 {
        self.weights.values().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
}

/// Next-token distribution with eos absorbing.
fn conditional(policy: &NGramPolicy, prompt: &[Token], generated: &[Token]) -> TokenDist {
    match policy.vocab().eos() {
        Some(eos) if generated.last() == Some(&eos) => TokenDist::point_mass(policy.vocab_size(), eos),
        _ => policy.dist_at(policy.context_index(prompt, generated)),
    }
}

fn ln_or_neg_inf(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        f64::NEG_INFINITY
    }
}

struct SequenceWalk<'a> {
    weighting: &'a NGramPolicy,
    other: &'a NGramPolicy,
    prompt: &'a [Token],
    length: usize,
}

impl SequenceWalk<'_> {
    /// Sum over complete sequences of `w(y) (log w(y) - log o(y))`, where `w`
    /// is the weighting policy. Log-probabilities are carried down the tree.
    fn visit(&self, generated: &mut Vec<Token>, log_w: f64, log_o: f64) -> Result<f64> {
        if generated.len() == self.length {
            return Ok(log_w.exp() * (log_w - log_o));
        }
        let w = conditional(self.weighting, self.prompt, generated);
        let o = conditional(self.other, self.prompt, generated);
        let mut total = 0.0;
        for y in 0..w.len() {
            let wy = w.prob(y);
            if wy == 0.0 {
                continue;
            }
            let oy = o.prob(y);
            if oy == 0.0 {
                return Err(Error::InfiniteDivergence { token: y });
            }
            generated.push(y as Token);
            total += self.visit(generated, log_w + wy.ln(), log_o + ln_or_neg_inf(oy))?;
            generated.pop();
        }
        Ok(total)
    }
}

/// Exact sequence-level KL over all `V^T` continuations of `spec.prompt`.
pub fn sequence_kl(
    direction: KlDirection,
    teacher: &NGramPolicy,
    student: &NGramPolicy,
    spec: &EnumerationSpec,
) -> Result<f64> {
    spec.check(spec.length, &[teacher, student])?;
    let (weighting, other) = match direction {
        KlDirection::Forward => (teacher, student),
        KlDirection::Reverse => (student, teacher),
    };
    let walk = SequenceWalk {
        weighting,
        other,
        prompt: &spec.prompt,
        length: spec.length,
    };
    // independent subtrees per first token, reduced in token order
    let first_w = conditional(weighting, &spec.prompt, &[]);
    let first_o = conditional(other, &spec.prompt, &[]);
    let mut total = 0.0;
    let mut generated = Vec::with_capacity(spec.length);
    for y in 0..first_w.len() {
        let wy = first_w.prob(y);
        if wy == 0.0 {
            continue;
        }
        if first_o.prob(y) == 0.0 {
            return Err(Error::InfiniteDivergence { token: y });
        }
        generated.push(y as Token);
        total += walk.visit(&mut generated, wy.ln(), first_o.prob(y).ln())?;
        generated.pop();
    }
    Ok(total)
}

/// Sequence-level KL averaged uniformly over several prompts.
pub fn mean_sequence_kl(
    direction: KlDirection,
    teacher: &NGramPolicy,
    student: &NGramPolicy,
    vocab: Vocabulary,
    length: usize,
    prompts: &[Vec<Token>],
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::Config("need at least one prompt".into()));
    }
    let mut total = 0.0;
    for prompt in prompts {
        total += sequence_kl(direction, teacher, student, &EnumerationSpec::new(vocab, length, prompt.clone()))?;
    }
    Ok(total / prompts.len() as f64)
}

fn marginals(policy: &NGramPolicy, prompt: &[Token], depth: usize) -> BTreeMap<Vec<Token>, f64> {
    let mut layer: BTreeMap<Vec<Token>, f64> = BTreeMap::from([(Vec::new(), 1.0)]);
    for _ in 0..depth {
        let mut next = BTreeMap::new();
        for (generated, weight) in &layer {
            let d = conditional(policy, prompt, generated);
            for (y, &py) in d.probs().iter().enumerate() {
                if py > 0.0 {
                    let mut g = generated.clone();
                    g.push(y as Token);
                    next.insert(g, weight * py);
                }
            }
        }
        layer = next;
    }
    layer
}

/// Exact distribution of the step-`t` state (`t - 1` generated tokens) under
/// rollouts of the chosen policy.
pub fn prefix_distribution(
    source: PrefixSource,
    teacher: &NGramPolicy,
    student: &NGramPolicy,
    spec: &EnumerationSpec,
    t: usize,
) -> Result<PrefixDistribution> {
    if t == 0 || t > spec.length {
        return Err(Error::Config(format!("step must be in 1..={}, got {t}", spec.length)));
    }
    spec.check(t - 1, &[teacher, student])?;
    let policy = match source {
        PrefixSource::Teacher => teacher,
        PrefixSource::Student => student,
    };
    Ok(PrefixDistribution {
        step: t,
        weights: marginals(policy, &spec.prompt, t - 1),
    })
}

/// `sum_t E_{s_t ~ d^t}[token KL at s_t]` with the state distribution chosen
/// explicitly, so it can also be evaluated under the mismatched distribution.
pub fn decomposition_rhs(
    direction: KlDirection,
    states: PrefixSource,
    teacher: &NGramPolicy,
    student: &NGramPolicy,
    spec: &EnumerationSpec,
) -> Result<f64> {
    spec.check(spec.length, &[teacher, student])?;
    let mut total = 0.0;
    for t in 1..=spec.length {
        let d = prefix_distribution(states, teacher, student, spec, t)?;
        for (generated, weight) in &d.weights {
            let p = conditional(teacher, &spec.prompt, generated);
            let q = conditional(student, &spec.prompt, generated);
            total += weight * directed_kl(direction, &p, &q)?;
        }
    }
    Ok(total)
}

/// Sequence KL against its token-level decomposition under the matching
/// state distribution (teacher states for forward, student states for reverse).
pub fn decomposition_check(
    direction: KlDirection,
    teacher: &NGramPolicy,
    student: &NGramPolicy,
    spec: &EnumerationSpec,
) -> Result<DecompositionReport> {
    let lhs = sequence_kl(direction, teacher, student, spec)?;
    let states = match direction {
        KlDirection::Forward => PrefixSource::Teacher,
        KlDirection::Reverse => PrefixSource::Student,
    };
    let rhs = decomposition_rhs(direction, states, teacher, student, spec)?;
    Ok(DecompositionReport {
        lhs,
        rhs,
        gap: (lhs - rhs).abs(),
    })
}
