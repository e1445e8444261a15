//! Exact token-level divergences, the mixed objective, the log-ratio reward
//! and the three single-sample reverse-KL estimators.
//!
//! Everything here sums over the full vocabulary; nothing is sampled.
//! Zero probabilities are never clamped: a divergence that would be infinite
//! is reported as [`Error::InfiniteDivergence`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::TokenDist;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlDirection {
    /// `KL(teacher || student)`, expectation under the teacher.
    Forward,
    /// `KL(student || teacher)`, expectation under the student.
    Reverse,
}

impl KlDirection {
    pub const ALL: [KlDirection; 2] = [KlDirection::Forward, KlDirection::Reverse];

    /// The mixing weight that selects this direction alone.
    pub fn as_mix(self) -> MixWeight {
        match self {
            KlDirection::Forward => MixWeight::FORWARD,
            KlDirection::Reverse => MixWeight::REVERSE,
        }
    }
}

impl std::fmt::Display for KlDirection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KlDirection::Forward => "forward",
            KlDirection::Reverse => "reverse",
        })
    }
}

impl std::str::FromStr for KlDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" | "fkl" => Ok(KlDirection::Forward),
            "reverse" | "rkl" => Ok(KlDirection::Reverse),
            other => Err(Error::Config(format!("unknown KL direction `{other}`"))),
        }
    }
}

/// Weight `lambda` on the reverse direction; `1 - lambda` goes to forward.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct MixWeight(f64);

impl MixWeight {
    pub const FORWARD: MixWeight = MixWeight(0.0);
    pub const REVERSE: MixWeight = MixWeight(1.0);

    pub fn new(lambda: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&lambda) {
            Ok(Self(lambda))
        } else {
            Err(Error::Config(format!("mixing weight must lie in [0, 1], got {lambda}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for MixWeight {
    type Error = Error;

    fn try_from(lambda: f64) -> Result<Self> {
        Self::new(lambda)
    }
}

impl From<MixWeight> for f64 {
    fn from(w: MixWeight) -> f64 {
        w.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    /// `-log rho`: unbiased, can be negative.
    K1,
    /// `(log rho)^2 / 2`: biased, exact to second order.
    K2,
    /// `rho - 1 - log rho`: unbiased and non-negative.
    K3,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [EstimatorKind::K1, EstimatorKind::K2, EstimatorKind::K3];
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k1" => Ok(EstimatorKind::K1),
            "k2" => Ok(EstimatorKind::K2),
            "k3" => Ok(EstimatorKind::K3),
            other => Err(Error::Config(format!("unknown estimator `{other}`"))),
        }
    }
}

fn same_len(a: &TokenDist, b: &TokenDist) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::LengthMismatch {
            expected: a.len(),
            actual: b.len(),
        })
    }
}

/// `sum_y a(y) (log a(y) - log b(y))`.
fn kl_sum(a: &TokenDist, b: &TokenDist) -> Result<f64> {
    same_len(a, b)?;
    let mut total = 0.0;
    for (y, (&pa, &pb)) in a.probs().iter().zip(b.probs()).enumerate() {
        if pa > 0.0 {
            if pb <= 0.0 {
                return Err(Error::InfiniteDivergence { token: y });
            }
            total += pa * (pa.ln() - pb.ln());
        }
    }
    Ok(total)
}

/// `KL(p || q)` with `p` the teacher and `q` the student.
pub fn forward_kl(p: &TokenDist, q: &TokenDist) -> Result<f64> {
    kl_sum(p, q)
}

/// `KL(q || p)` with `q` the student and `p` the teacher.
pub fn reverse_kl(q: &TokenDist, p: &TokenDist) -> Result<f64> {
    kl_sum(q, p)
}

/// Divergence between teacher `p` and student `q` in the given direction.
pub fn directed_kl(direction: KlDirection, p: &TokenDist, q: &TokenDist) -> Result<f64> {
    match direction {
        KlDirection::Forward => forward_kl(p, q),
        KlDirection::Reverse => reverse_kl(q, p),
    }
}

/// `lambda KL(q || p) + (1 - lambda) KL(p || q)`. At the endpoints only the
/// selected direction is evaluated, so the result is that direction exactly.
pub fn mixed_kl(p: &TokenDist, q: &TokenDist, lambda: MixWeight) -> Result<f64> {
    let l = lambda.value();
    if l == 0.0 {
        return forward_kl(p, q);
    }
    if l == 1.0 {
        return reverse_kl(q, p);
    }
    Ok(l * reverse_kl(q, p)? + (1.0 - l) * forward_kl(p, q)?)
}

fn log_ratio_at(p: &TokenDist, q: &TokenDist, y: usize) -> Result<f64> {
    same_len(p, q)?;
    if y >= p.len() {
        return Err(Error::InvalidToken {
            token: y as u32,
            vocab: p.len(),
        });
    }
    let (py, qy) = (p.prob(y), q.prob(y));
    if py <= 0.0 || qy <= 0.0 {
        return Err(Error::ZeroProbability { token: y });
    }
    Ok(py.ln() - qy.ln())
}

/// Dense per-token reward `log p(y) - log q(y)`.
pub fn log_ratio_reward(p: &TokenDist, q: &TokenDist, y: usize) -> Result<f64> {
    log_ratio_at(p, q, y)
}

/// Single-sample estimator of `KL(q || p)` at `y`, with `rho = p(y) / q(y)`.
pub fn estimator_sample(kind: EstimatorKind, p: &TokenDist, q: &TokenDist, y: usize) -> Result<f64> {
    let log_rho = log_ratio_at(p, q, y)?;
    Ok(match kind {
        EstimatorKind::K1 => -log_rho,
        EstimatorKind::K2 => 0.5 * log_rho * log_rho,
        EstimatorKind::K3 => {
            let rho = p.prob(y) / q.prob(y);
            // rho - 1 - log rho is >= 0 in exact arithmetic; guard the rounding near rho = 1
            (rho - 1.0 - log_rho).max(0.0)
        }
    })
}

/// Exact `E_{y ~ q}[k(y)]` by full summation.
pub fn estimator_expectation(kind: EstimatorKind, p: &TokenDist, q: &TokenDist) -> Result<f64> {
    same_len(p, q)?;
    let mut total = 0.0;
    for (y, &qy) in q.probs().iter().enumerate() {
        if qy > 0.0 {
            if p.prob(y) <= 0.0 {
                return Err(Error::InfiniteDivergence { token: y });
            }
            total += qy * estimator_sample(kind, p, q, y)?;
        }
    }
    Ok(total)
}
