//! Vocabularies, token distributions and tabular autoregressive policies.
//!
//! An [`NGramPolicy`] of order `k` keeps one logit row per context, where a
//! context is the last `k` tokens of `prompt ++ generated`. Short contexts are
//! left-padded with a reserved pad id equal to `V`, so the table has
//! `(V + 1)^k` rows of `V` logits and every prefix maps to some row.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{child_rng, rng_from_seed, LabRng};

pub type Token = u32;

const SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
    eos: Option<Token>,
}

impl Vocabulary {
    /// A vocabulary of `size` tokens. `eos = None` selects fixed-length mode,
    /// where rollouts always run to their maximum length.
    pub fn new(size: usize, eos: Option<Token>) -> Result<Self> {
        if size < 2 {
            return Err(Error::Config(format!("vocabulary size must be >= 2, got {size}")));
        }
        if let Some(e) = eos {
            if e as usize >= size {
                return Err(Error::InvalidToken { token: e, vocab: size });
            }
        }
        Ok(Self { size, eos })
    }

    pub fn fixed_length(size: usize) -> Result<Self> {
        Self::new(size, None)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn eos(&self) -> Option<Token> {
        self.eos
    }

    /// Reserved id used to left-pad short contexts. Never a sampleable token.
    pub fn pad(&self) -> Token {
        self.size as Token
    }

    pub fn check(&self, token: Token) -> Result<()> {
        if (token as usize) < self.size {
            Ok(())
        } else {
            Err(Error::InvalidToken { token, vocab: self.size })
        }
    }

    pub fn check_all(&self, tokens: &[Token]) -> Result<()> {
        tokens.iter().try_for_each(|&t| self.check(t))
    }
}

/// An exact probability vector over a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDist {
    probs: Vec<f64>,
}

impl TokenDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidDistribution(format!(
                "need at least 2 entries, got {}",
                probs.len()
            )));
        }
        if let Some((i, p)) = probs.iter().enumerate().find(|(_, p)| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::InvalidDistribution(format!("entry {i} is {p}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("entries sum to {total}")));
        }
        Ok(Self { probs })
    }

    /// Softmax of `logits / temperature`, computed with a max shift.
    pub fn softmax(logits: &[f64], temperature: f64) -> Self {
        debug_assert!(temperature > 0.0);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|z| ((z - max) / temperature).exp()).collect();
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        Self { probs }
    }

    pub fn uniform(size: usize) -> Self {
        Self {
            probs: vec![1.0 / size as f64; size],
        }
    }

    pub fn point_mass(size: usize, token: Token) -> Self {
        let mut probs = vec![0.0; size];
        probs[token as usize] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, token: usize) -> f64 {
        self.probs[token]
    }

    pub fn entropy(&self) -> f64 {
        entropy(self)
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Sharpens or flattens the distribution: `p^(1/t)` renormalized.
    pub fn with_temperature(&self, temperature: f64) -> Self {
        if temperature == 1.0 {
            return self.clone();
        }
        let logits: Vec<f64> = self
            .probs
            .iter()
            .map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
            .collect();
        Self::softmax(&logits, temperature)
    }

    /// Keeps the highest-probability tokens allowed by `top_k` and the
    /// smallest nucleus reaching `top_p`, then renormalizes. Ties are broken
    /// by token id so the result is deterministic.
    pub fn truncate(&self, top_k: Option<usize>, top_p: f64) -> Self {
        let mut order: Vec<usize> = (0..self.probs.len()).collect();
        order.sort_by(|&a, &b| self.probs[b].total_cmp(&self.probs[a]).then(a.cmp(&b)));
        let limit = top_k.unwrap_or(order.len()).clamp(1, order.len());
        let mut kept = 0;
        let mut mass = 0.0;
        for &tok in &order[..limit] {
            kept += 1;
            mass += self.probs[tok];
            if mass >= top_p {
                break;
            }
        }
        let mut probs = vec![0.0; self.probs.len()];
        for &tok in &order[..kept] {
            probs[tok] = self.probs[tok] / mass;
        }
        Self { probs }
    }

    /// Inverse-CDF draw. Zero-probability tokens are never returned.
    pub fn sample(&self, rng: &mut impl Rng) -> Token {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last_positive = i;
                if u < acc {
                    return i as Token;
                }
            }
        }
        last_positive as Token
    }
}

/// Shannon entropy in nats, with `0 log 0 = 0`.
pub fn entropy(dist: &TokenDist) -> f64 {
    -dist
        .probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// A state `s_t = (x, y_<t)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Prefix {
    pub prompt: Vec<Token>,
    pub generated: Vec<Token>,
}

impl Prefix {
    pub fn new(prompt: Vec<Token>, generated: Vec<Token>) -> Self {
        Self { prompt, generated }
    }

    pub fn prompt_only(prompt: Vec<Token>) -> Self {
        Self {
            prompt,
            generated: Vec::new(),
        }
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        vocab.check_all(&self.prompt)?;
        vocab.check_all(&self.generated)?;
        if let Some(eos) = vocab.eos() {
            if let Some(pos) = self.generated.iter().position(|&t| t == eos) {
                if pos + 1 != self.generated.len() {
                    return Err(Error::Config(format!(
                        "generated tokens continue after eos at position {pos}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Tabular softmax policy over order-`k` contexts.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramPolicy {
    vocab: Vocabulary,
    order: usize,
    temperature: f64,
    logits: Vec<f64>,
}

impl NGramPolicy {
    /// All-zero logits: the uniform policy.
    pub fn zeros(vocab: Vocabulary, order: usize) -> Result<Self> {
        let rows = context_count(vocab.size(), order)?;
        Ok(Self {
            vocab,
            order,
            temperature: 1.0,
            logits: vec![0.0; rows * vocab.size()],
        })
    }

    pub fn from_logits(vocab: Vocabulary, order: usize, temperature: f64, logits: Vec<f64>) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        let rows = context_count(vocab.size(), order)?;
        if logits.len() != rows * vocab.size() {
            return Err(Error::LengthMismatch {
                expected: rows * vocab.size(),
                actual: logits.len(),
            });
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite("policy logits".into()));
        }
        Ok(Self {
            vocab,
            order,
            temperature,
            logits,
        })
    }

    /// Logits drawn i.i.d. from `N(0, scale^2)`.
    pub fn random(vocab: Vocabulary, order: usize, scale: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut policy = Self::zeros(vocab, order)?;
        let normal = rand_distr::Normal::new(0.0, scale).map_err(|e| Error::Config(e.to_string()))?;
        for z in &mut policy.logits {
            *z = rng.sample(normal);
        }
        Ok(policy)
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn n_contexts(&self) -> usize {
        self.logits.len() / self.vocab.size()
    }

    pub fn n_params(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn row(&self, context: usize) -> &[f64] {
        let v = self.vocab.size();
        &self.logits[context * v..(context + 1) * v]
    }

    pub fn row_mut(&mut self, context: usize) -> &mut [f64] {
        let v = self.vocab.size();
        &mut self.logits[context * v..(context + 1) * v]
    }

    /// Row index for the state whose full token history is `prompt ++ generated`.
    /// Tokens are assumed valid.
    pub fn context_index(&self, prompt: &[Token], generated: &[Token]) -> usize {
        let base = self.vocab.size() + 1;
        let total = prompt.len() + generated.len();
        let mut index = 0;
        for i in 0..self.order {
            // position (total - order + i) in the concatenated history
            let token = (total + i)
                .checked_sub(self.order)
                .map(|pos| {
                    if pos < prompt.len() {
                        prompt[pos]
                    } else {
                        generated[pos - prompt.len()]
                    }
                })
                .unwrap_or(self.vocab.pad());
            index = index * base + token as usize;
        }
        index
    }

    pub fn context_of(&self, prefix: &Prefix) -> Result<usize> {
        prefix.validate(&self.vocab)?;
        Ok(self.context_index(&prefix.prompt, &prefix.generated))
    }

    pub fn dist_at(&self, context: usize) -> TokenDist {
        TokenDist::softmax(self.row(context), self.temperature)
    }

    /// `q(. | s_t)` for the given prefix.
    pub fn token_dist(&self, prefix: &Prefix) -> Result<TokenDist> {
        Ok(self.dist_at(self.context_of(prefix)?))
    }

    pub fn to_text(&self) -> String {
        let v = self.vocab.size();
        let mut out = String::new();
        let _ = writeln!(out, "{POLICY_MAGIC}");
        let _ = writeln!(out, "order {}", self.order);
        let _ = writeln!(out, "vocab {v}");
        match self.vocab.eos() {
            Some(e) => {
                let _ = writeln!(out, "eos {e}");
            }
            None => {
                let _ = writeln!(out, "eos none");
            }
        }
        let _ = writeln!(out, "temperature {:?}", self.temperature);
        for row in self.logits.chunks(v) {
            let line: Vec<String> = row.iter().map(|z| format!("{z:?}")).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(POLICY_MAGIC) {
            return Err(Error::Format(format!("missing header line `{POLICY_MAGIC}`")));
        }
        let mut field = |name: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| Error::Format(format!("missing `{name}`")))?;
            line.strip_prefix(name)
                .and_then(|rest| rest.strip_prefix(' '))
                .map(str::to_owned)
                .ok_or_else(|| Error::Format(format!("expected `{name} <value>`, got `{line}`")))
        };
        let parse_err = |what: &str, e: &dyn std::fmt::Display| Error::Format(format!("{what}: {e}"));
        let order: usize = field("order")?.parse().map_err(|e| parse_err("order", &e))?;
        let size: usize = field("vocab")?.parse().map_err(|e| parse_err("vocab", &e))?;
        let eos = match field("eos")?.as_str() {
            "none" => None,
            s => Some(s.parse::<Token>().map_err(|e| parse_err("eos", &e))?),
        };
        let temperature: f64 = field("temperature")?
            .parse()
            .map_err(|e| parse_err("temperature", &e))?;
        let logits = lines
            .flat_map(str::split_whitespace)
            .map(|s| s.parse::<f64>().map_err(|e| parse_err("logit", &e)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_logits(Vocabulary::new(size, eos)?, order, temperature, logits)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

const POLICY_MAGIC: &str = "distlab-policy v1";

fn context_count(vocab: usize, order: usize) -> Result<usize> {
    u32::try_from(order)
        .ok()
        .and_then(|k| (vocab + 1).checked_pow(k))
        .and_then(|rows| rows.checked_mul(vocab).map(|_| rows))
        .ok_or_else(|| Error::Config(format!("context table for V={vocab}, order={order} is too large")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_p: f64,
    /// `None` keeps every token.
    pub top_k: Option<usize>,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            top_k: None,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    /// Offline teacher rollout settings: temperature 1.0, top-p 0.95, top-k 20.
    pub fn teacher_rollouts(seed: u64) -> Self {
        Self {
            temperature: 1.0,
            top_p: 0.95,
            top_k: Some(20),
            seed,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("sampler temperature must be positive, got {}", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        if self.top_k == Some(0) {
            return Err(Error::Config("top_k must be positive".into()));
        }
        Ok(())
    }

    /// The distribution actually sampled from.
    pub fn sampling_dist(&self, dist: &TokenDist) -> TokenDist {
        let tempered = dist.with_temperature(self.temperature);
        if self.top_k.is_none() && self.top_p >= 1.0 {
            tempered
        } else {
            tempered.truncate(self.top_k, self.top_p)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub prompt: Vec<Token>,
    pub response: Vec<Token>,
    /// Entropy of the untruncated policy distribution at each generated position.
    pub per_token_entropy: Vec<f64>,
    pub terminated_by_eos: bool,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }
}

/// Samples a response with the RNG seeded from `sampler.seed`.
pub fn rollout(policy: &NGramPolicy, prompt: &[Token], max_len: usize, sampler: &SamplerConfig) -> Result<Rollout> {
    rollout_with_rng(policy, prompt, max_len, sampler, &mut rng_from_seed(sampler.seed))
}

/// Samples until eos or `max_len` tokens. `sampler.seed` is ignored in favour of `rng`.
pub fn rollout_with_rng(
    policy: &NGramPolicy,
    prompt: &[Token],
    max_len: usize,
    sampler: &SamplerConfig,
    rng: &mut LabRng,
) -> Result<Rollout> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be >= 1".into()));
    }
    sampler.validate()?;
    policy.vocab().check_all(prompt)?;
    let eos = policy.vocab().eos();
    let mut response = Vec::with_capacity(max_len);
    let mut per_token_entropy = Vec::with_capacity(max_len);
    let mut terminated_by_eos = false;
    while response.len() < max_len {
        let dist = policy.dist_at(policy.context_index(prompt, &response));
        per_token_entropy.push(dist.entropy());
        let token = sampler.sampling_dist(&dist).sample(rng);
        response.push(token);
        if Some(token) == eos {
            terminated_by_eos = true;
            break;
        }
    }
    Ok(Rollout {
        prompt: prompt.to_vec(),
        response,
        per_token_entropy,
        terminated_by_eos,
    })
}

/// `n_rollouts` rollouts per prompt; rollout `j` of prompt `i` uses the child
/// seed derived from `(sampler.seed, i, j)`.
pub fn rollouts_for(
    policy: &NGramPolicy,
    prompts: &[Vec<Token>],
    sampler: &SamplerConfig,
    n_rollouts: usize,
    max_len: usize,
) -> Result<Vec<Rollout>> {
    let mut out = Vec::with_capacity(prompts.len() * n_rollouts);
    for (i, prompt) in prompts.iter().enumerate() {
        for j in 0..n_rollouts {
            let mut rng = child_rng(sampler.seed, &[i as u64, j as u64]);
            out.push(rollout_with_rng(policy, prompt, max_len, sampler, &mut rng)?);
        }
    }
    Ok(out)
}

/// Per-token mean of the predictive entropy over every generated token of
/// every rollout (long responses weigh more than short ones).
pub fn mean_rollout_entropy(
    policy: &NGramPolicy,
    prompts: &[Vec<Token>],
    sampler: &SamplerConfig,
    n_rollouts: usize,
    max_len: usize,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::Config("mean_rollout_entropy needs at least one prompt".into()));
    }
    if n_rollouts == 0 {
        return Err(Error::Config("n_rollouts must be >= 1".into()));
    }
    let rollouts = rollouts_for(policy, prompts, sampler, n_rollouts, max_len)?;
    Ok(mean_token_entropy(&rollouts))
}

pub fn mean_token_entropy(rollouts: &[Rollout]) -> f64 {
    let (sum, count) = rollouts
        .iter()
        .flat_map(|r| r.per_token_entropy.iter())
        .fold((0.0, 0usize), |(s, n), h| (s + h, n + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}
