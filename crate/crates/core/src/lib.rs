//! A desk-scale laboratory for autoregressive knowledge distillation.
//!
//! Tabular n-gram policies stand in for the student and teacher so every
//! quantity (sequence-level KL, prefix distributions, policy gradients) can
//! be computed exactly and checked against brute-force oracles. Alongside
//! them live a streaming full-vocabulary KL kernel for linear LM heads, an
//! entropy-gated length curriculum, and a closed-form FLOPs model of
//! offline versus online distillation.

#[cfg(test)]
macro_rules! assert_close {
    ($a:expr, $b:expr, $tol:expr) => {{
        let (a, b): (f64, f64) = ($a, $b);
        let tol: f64 = $tol;
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }};
}

pub mod curriculum;
pub mod error;
pub mod flops;
pub mod fused_kl;
pub mod grad;
pub mod harness;
pub mod kl;
pub mod objectives;
pub mod policy;
pub mod rng;
pub mod seq_kl;

pub use error::{Error, Result};
pub use kl::{EstimatorKind, KlDirection, MixWeight};
pub use policy::{NGramPolicy, Prefix, Rollout, SamplerConfig, Token, TokenDist, Vocabulary};
