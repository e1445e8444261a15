//! Streaming full-vocabulary KL for a linear LM head.
//!
//! Logits `z_v = w_v . h` are produced one vocabulary tile at a time and never
//! stored beyond that tile. For one token position:
//!
//! 1. pass 1 folds every tile into online log-sum-exp statistics for the
//!    teacher and the student (running max, rescaled sum of exponentials);
//! 2. pass 2 recomputes each tile and accumulates `sum_v a_v (log a_v - log b_v)`,
//!    where `a` is the teacher for forward KL and the student for reverse KL;
//! 3. the gradient pass recomputes each tile once more and streams
//!    `dL/dz_v` into the hidden-state gradient and per-row weight gradients.
//!
//! Working memory is two logit tiles (plus two `H`-vectors for gradients),
//! independent of `V`. Tiles are visited in increasing vocabulary order, so
//! for a fixed tile size results are bit-reproducible. All arithmetic is f64.

use std::ops::Range;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kl::KlDirection;
use crate::rng::rng_from_seed;

/// Row-major `V x H` language-model head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    vocab: usize,
    hidden: usize,
    data: Vec<f64>,
}

impl HeadWeights {
    pub fn new(vocab: usize, hidden: usize, data: Vec<f64>) -> Result<Self> {
        if vocab == 0 || hidden == 0 {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        if data.len() != vocab * hidden {
            return Err(Error::LengthMismatch {
                expected: vocab * hidden,
                actual: data.len(),
            });
        }
        if data.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("head weights".into()));
        }
        Ok(Self { vocab, hidden, data })
    }

    /// Entries uniform in `[-scale, scale]`.
    pub fn random(vocab: usize, hidden: usize, scale: f64, rng: &mut impl Rng) -> Result<Self> {
        let data = (0..vocab * hidden).map(|_| rng.gen_range(-scale..=scale)).collect();
        Self::new(vocab, hidden, data)
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn row(&self, v: usize) -> &[f64] {
        &self.data[v * self.hidden..(v + 1) * self.hidden]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState(pub Vec<f64>);

impl HiddenState {
    pub fn random(hidden: usize, scale: f64, rng: &mut impl Rng) -> Self {
        Self((0..hidden).map(|_| rng.gen_range(-scale..=scale)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileConfig {
    pub tile_size: usize,
}

impl TileConfig {
    pub fn new(tile_size: usize) -> Self {
        Self { tile_size }
    }

    fn check(&self, vocab: usize) -> Result<()> {
        if self.tile_size == 0 || self.tile_size > vocab {
            return Err(Error::Config(format!(
                "tile size must be in 1..={vocab}, got {}",
                self.tile_size
            )));
        }
        Ok(())
    }

    /// Canonical tile order: contiguous ranges covering `0..vocab`.
    pub fn tiles(&self, vocab: usize) -> impl Iterator<Item = Range<usize>> {
        let t = self.tile_size;
        (0..vocab).step_by(t).map(move |start| start..(start + t).min(vocab))
    }
}

/// Online log-sum-exp state: `lse = max + ln(sum_exp)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunningStats {
    pub max_logit: f64,
    /// `sum_v exp(z_v - max_logit)` over everything seen so far.
    pub sum_exp: f64,
}

impl Default for RunningStats {
    fn default() -> Self {
        Self {
            max_logit: f64::NEG_INFINITY,
            sum_exp: 0.0,
        }
    }
}

impl RunningStats {
    pub fn push_tile(&mut self, logits: &[f64]) {
        let tile_max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if tile_max > self.max_logit {
            self.sum_exp *= (self.max_logit - tile_max).exp();
            self.max_logit = tile_max;
        }
        let m = self.max_logit;
        self.sum_exp += logits.iter().map(|z| (z - m).exp()).sum::<f64>();
    }

    /// Combines statistics from two disjoint sets of logits.
    pub fn merge(self, other: RunningStats) -> RunningStats {
        if other.max_logit == f64::NEG_INFINITY {
            return self;
        }
        if self.max_logit == f64::NEG_INFINITY {
            return other;
        }
        let max_logit = self.max_logit.max(other.max_logit);
        RunningStats {
            max_logit,
            sum_exp: self.sum_exp * (self.max_logit - max_logit).exp()
                + other.sum_exp * (other.max_logit - max_logit).exp(),
        }
    }

    pub fn log_sum_exp(&self) -> f64 {
        self.max_logit + self.sum_exp.ln()
    }
}

/// Tracks transient floats held by the kernel for one token position.
#[derive(Debug, Default)]
struct Meter {
    live: usize,
    peak: usize,
}

impl Meter {
    fn take(&mut self, n: usize) -> Vec<f64> {
        self.live += n;
        self.peak = self.peak.max(self.live);
        vec![0.0; n]
    }

    fn give(&mut self, buf: Vec<f64>) {
        self.live -= buf.len();
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project_tile(weights: &HeadWeights, h: &[f64], range: Range<usize>, out: &mut [f64]) -> Result<()> {
    for (slot, v) in out.iter_mut().zip(range) {
        let z = dot(weights.row(v), h);
        if !z.is_finite() {
            return Err(Error::NonFinite(format!("logit {v} is {z}")));
        }
        *slot = z;
    }
    Ok(())
}

fn check_pair(teacher: &HeadWeights, student: &HeadWeights, h_t: &HiddenState, h_s: &HiddenState) -> Result<()> {
    if teacher.vocab() != student.vocab() {
        return Err(Error::LengthMismatch {
            expected: teacher.vocab(),
            actual: student.vocab(),
        });
    }
    if h_t.len() != teacher.hidden() {
        return Err(Error::LengthMismatch {
            expected: teacher.hidden(),
            actual: h_t.len(),
        });
    }
    if h_s.len() != student.hidden() {
        return Err(Error::LengthMismatch {
            expected: student.hidden(),
            actual: h_s.len(),
        });
    }
    Ok(())
}

fn streaming_lse_metered(weights: &HeadWeights, h: &HiddenState, tiles: TileConfig, meter: &mut Meter) -> Result<f64> {
    if h.len() != weights.hidden() {
        return Err(Error::LengthMismatch {
            expected: weights.hidden(),
            actual: h.len(),
        });
    }
    tiles.check(weights.vocab())?;
    let mut buf = meter.take(tiles.tile_size);
    let mut stats = RunningStats::default();
    for range in tiles.tiles(weights.vocab()) {
        let n = range.len();
        project_tile(weights, &h.0, range, &mut buf[..n])?;
        stats.push_tile(&buf[..n]);
    }
    meter.give(buf);
    Ok(stats.log_sum_exp())
}

/// `log sum_v exp(w_v . h)` without materializing the logits.
pub fn streaming_lse(weights: &HeadWeights, h: &HiddenState, tiles: TileConfig) -> Result<f64> {
    streaming_lse_metered(weights, h, tiles, &mut Meter::default())
}

/// Normalizers and reusable tile buffers after pass 1.
struct Normalized {
    lse_t: f64,
    lse_s: f64,
    buf_t: Vec<f64>,
    buf_s: Vec<f64>,
}

struct Pair<'a> {
    teacher: &'a HeadWeights,
    student: &'a HeadWeights,
    h_t: &'a HiddenState,
    h_s: &'a HiddenState,
    tiles: TileConfig,
}

impl Pair<'_> {
    fn normalize(&self, meter: &mut Meter) -> Result<Normalized> {
        check_pair(self.teacher, self.student, self.h_t, self.h_s)?;
        self.tiles.check(self.teacher.vocab())?;
        let mut buf_t = meter.take(self.tiles.tile_size);
        let mut buf_s = meter.take(self.tiles.tile_size);
        let mut stats_t = RunningStats::default();
        let mut stats_s = RunningStats::default();
        for range in self.tiles.tiles(self.teacher.vocab()) {
            let n = range.len();
            project_tile(self.teacher, &self.h_t.0, range.clone(), &mut buf_t[..n])?;
            project_tile(self.student, &self.h_s.0, range, &mut buf_s[..n])?;
            stats_t.push_tile(&buf_t[..n]);
            stats_s.push_tile(&buf_s[..n]);
        }
        Ok(Normalized {
            lse_t: stats_t.log_sum_exp(),
            lse_s: stats_s.log_sum_exp(),
            buf_t,
            buf_s,
        })
    }

    /// Calls `f(v, log p_v, log q_v)` for every vocabulary entry, tile by tile.
    fn for_each_log_prob(&self, norm: &mut Normalized, mut f: impl FnMut(usize, f64, f64)) -> Result<()> {
        for range in self.tiles.tiles(self.teacher.vocab()) {
            let n = range.len();
            let start = range.start;
            project_tile(self.teacher, &self.h_t.0, range.clone(), &mut norm.buf_t[..n])?;
            project_tile(self.student, &self.h_s.0, range, &mut norm.buf_s[..n])?;
            for i in 0..n {
                f(start + i, norm.buf_t[i] - norm.lse_t, norm.buf_s[i] - norm.lse_s);
            }
        }
        Ok(())
    }

    fn kl(&self, direction: KlDirection, norm: &mut Normalized) -> Result<f64> {
        let mut acc = 0.0;
        self.for_each_log_prob(norm, |_, log_p, log_q| {
            acc += match direction {
                KlDirection::Forward => log_p.exp() * (log_p - log_q),
                KlDirection::Reverse => log_q.exp() * (log_q - log_p),
            };
        })?;
        Ok(acc)
    }
}

fn fused_kl_metered(
    direction: KlDirection,
    pair: &Pair<'_>,
    meter: &mut Meter,
) -> Result<f64> {
    let mut norm = pair.normalize(meter)?;
    let kl = pair.kl(direction, &mut norm)?;
    meter.give(norm.buf_t);
    meter.give(norm.buf_s);
    Ok(kl)
}

/// Exact KL between `softmax(W_t h_t)` and `softmax(W_s h_s)` in the requested
/// direction, streamed over vocabulary tiles.
pub fn fused_token_kl(
    direction: KlDirection,
    teacher_weights: &HeadWeights,
    student_weights: &HeadWeights,
    h_teacher: &HiddenState,
    h_student: &HiddenState,
    tiles: TileConfig,
) -> Result<f64> {
    let pair = Pair {
        teacher: teacher_weights,
        student: student_weights,
        h_t: h_teacher,
        h_s: h_student,
        tiles,
    };
    fused_kl_metered(direction, &pair, &mut Meter::default())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedKlGrad {
    pub loss: f64,
    /// `dL/dh_student`.
    pub grad_h_student: Vec<f64>,
}

fn fused_grad_metered(
    direction: KlDirection,
    pair: &Pair<'_>,
    meter: &mut Meter,
    row_sink: &mut dyn FnMut(usize, &[f64]),
) -> Result<FusedKlGrad> {
    let mut norm = pair.normalize(meter)?;
    let loss = pair.kl(direction, &mut norm)?;
    let hidden = pair.student.hidden();
    let mut grad_h = meter.take(hidden);
    let mut row_grad = meter.take(hidden);
    let h_s = &pair.h_s.0;
    pair.for_each_log_prob(&mut norm, |v, log_p, log_q| {
        let q = log_q.exp();
        // dL/dz_v for the student logit
        let coef = match direction {
            KlDirection::Forward => q - log_p.exp(),
            KlDirection::Reverse => q * ((log_q - log_p) - loss),
        };
        for ((g, r), (w, h)) in grad_h
            .iter_mut()
            .zip(row_grad.iter_mut())
            .zip(pair.student.row(v).iter().zip(h_s))
        {
            *g += coef * w;
            *r = coef * h;
        }
        row_sink(v, &row_grad);
    })?;
    let grad_h_student = grad_h.clone();
    meter.give(grad_h);
    meter.give(row_grad);
    meter.give(norm.buf_t);
    meter.give(norm.buf_s);
    Ok(FusedKlGrad { loss, grad_h_student })
}

/// Gradient of the fused loss with respect to the student hidden state and
/// the student head. Row gradients `dL/dw_v` are streamed to `row_sink`, once
/// per vocabulary entry in canonical order.
pub fn fused_token_kl_grad(
    direction: KlDirection,
    teacher_weights: &HeadWeights,
    student_weights: &HeadWeights,
    h_teacher: &HiddenState,
    h_student: &HiddenState,
    tiles: TileConfig,
    mut row_sink: impl FnMut(usize, &[f64]),
) -> Result<FusedKlGrad> {
    let pair = Pair {
        teacher: teacher_weights,
        student: student_weights,
        h_t: h_teacher,
        h_s: h_student,
        tiles,
    };
    fused_grad_metered(direction, &pair, &mut Meter::default(), &mut row_sink)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeOp {
    Lse,
    Kl,
    KlGrad,
}

impl std::str::FromStr for ProbeOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lse" => Ok(ProbeOp::Lse),
            "kl" => Ok(ProbeOp::Kl),
            "kl-grad" | "kl_grad" => Ok(ProbeOp::KlGrad),
            other => Err(Error::Config(format!("unknown kernel op `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub op: ProbeOp,
    pub vocab: usize,
    pub hidden: usize,
    pub tile: usize,
    pub peak_transient_floats: usize,
}

/// Runs `op` once on random inputs and reports the peak number of transient
/// floats the kernel held for that token position.
pub fn memory_probe(op: ProbeOp, vocab: usize, hidden: usize, tile: usize, seed: u64) -> Result<ProbeReport> {
    let mut rng = rng_from_seed(seed);
    let scale = 1.0 / (hidden as f64).sqrt();
    let teacher = HeadWeights::random(vocab, hidden, scale, &mut rng)?;
    let student = HeadWeights::random(vocab, hidden, scale, &mut rng)?;
    let h_t = HiddenState::random(hidden, 1.0, &mut rng);
    let h_s = HiddenState::random(hidden, 1.0, &mut rng);
    let tiles = TileConfig::new(tile);
    let pair = Pair {
        teacher: &teacher,
        student: &student,
        h_t: &h_t,
        h_s: &h_s,
        tiles,
    };
    let mut meter = Meter::default();
    match op {
        ProbeOp::Lse => {
            streaming_lse_metered(&student, &h_s, tiles, &mut meter)?;
        }
        ProbeOp::Kl => {
            fused_kl_metered(KlDirection::Forward, &pair, &mut meter)?;
        }
        ProbeOp::KlGrad => {
            fused_grad_metered(KlDirection::Reverse, &pair, &mut meter, &mut |_, _| {})?;
        }
    }
    Ok(ProbeReport {
        op,
        vocab,
        hidden,
        tile,
        peak_transient_floats: meter.peak,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub vocab: usize,
    pub hidden: usize,
    pub tile: usize,
    pub direction: KlDirection,
    pub repetitions: usize,
    pub loss: f64,
    pub dense_loss: f64,
    /// Mean seconds per fused evaluation.
    pub wall_time: f64,
    pub peak_transient_floats: usize,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Times the fused kernel on seeded random heads and checks it against the
/// dense reference once.
pub fn bench(
    vocab: usize,
    hidden: usize,
    tile: usize,
    direction: KlDirection,
    repetitions: usize,
    seed: u64,
) -> Result<BenchReport> {
    if repetitions == 0 {
        return Err(Error::Config("repetitions must be >= 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    let scale = 1.0 / (hidden as f64).sqrt();
    let teacher = HeadWeights::random(vocab, hidden, scale, &mut rng)?;
    let student = HeadWeights::random(vocab, hidden, scale, &mut rng)?;
    let h_t = HiddenState::random(hidden, 1.0, &mut rng);
    let h_s = HiddenState::random(hidden, 1.0, &mut rng);
    let tiles = TileConfig::new(tile);
    let mut loss = 0.0;
    let start = Instant::now();
    for _ in 0..repetitions {
        loss = fused_token_kl(direction, &teacher, &student, &h_t, &h_s, tiles)?;
    }
    let wall_time = start.elapsed().as_secs_f64() / repetitions as f64;
    let dense_loss = dense::kl(direction, &teacher, &student, &h_t, &h_s)?;
    let peak = memory_probe(ProbeOp::Kl, vocab, hidden, tile, seed)?.peak_transient_floats;
    Ok(BenchReport {
        vocab,
        hidden,
        tile,
        direction,
        repetitions,
        loss,
        dense_loss,
        wall_time,
        peak_transient_floats: peak,
    })
}

/// Dense reference: materializes full logit and probability vectors.
pub mod dense {
    use super::{HeadWeights, HiddenState};
    use crate::error::{Error, Result};
    use crate::kl::KlDirection;

    pub fn logits(weights: &HeadWeights, h: &HiddenState) -> Vec<f64> {
        (0..weights.vocab())
            .map(|v| weights.row(v).iter().zip(&h.0).map(|(w, x)| w * x).sum())
            .collect()
    }

    pub fn log_softmax(z: &[f64]) -> Vec<f64> {
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        z.iter().map(|x| x - lse).collect()
    }

    pub fn lse(weights: &HeadWeights, h: &HiddenState) -> f64 {
        let z = logits(weights, h);
        z[0] - log_softmax(&z)[0]
    }

    pub fn kl(
        direction: KlDirection,
        teacher: &HeadWeights,
        student: &HeadWeights,
        h_t: &HiddenState,
        h_s: &HiddenState,
    ) -> Result<f64> {
        if teacher.vocab() != student.vocab() {
            return Err(Error::LengthMismatch {
                expected: teacher.vocab(),
                actual: student.vocab(),
            });
        }
        let log_p = log_softmax(&logits(teacher, h_t));
        let log_q = log_softmax(&logits(student, h_s));
        let (a, b) = match direction {
            KlDirection::Forward => (&log_p, &log_q),
            KlDirection::Reverse => (&log_q, &log_p),
        };
        Ok(a.iter().zip(b).map(|(la, lb)| la.exp() * (la - lb)).sum())
    }
}
