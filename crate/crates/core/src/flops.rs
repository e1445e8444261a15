//! Closed-form compute model for offline (cached teacher logits) versus
//! online (student rollouts + teacher scoring) distillation steps.
//!
//! Counting conventions:
//! - a multiply-add is two FLOPs;
//! - per-token dense cost is `N [2H(H + 2 H_kv) + 2H^2 + 2*3HI]` (QKV, output
//!   projection, SwiGLU MLP); the output projection is `2H^2` even when
//!   `n_heads * head_dim != H`;
//! - the full-vocabulary LM head adds `2HV` per token;
//! - attention costs `4 * ctx * n_heads * head_dim` per token per layer, with
//!   `ctx = L/2` for a causal forward pass, and `P + r - 1` cached positions
//!   for decode step `r`;
//! - backward is `2F`, and elementwise KL arithmetic is ignored.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub hidden: u64,
    pub intermediate: u64,
    pub layers: u64,
    pub n_heads: u64,
    pub kv_heads: u64,
    pub head_dim: u64,
    pub vocab: u64,
}

pub const QWEN3_VOCAB: u64 = 151_936;

impl ModelDims {
    pub const QWEN3_0_6B: ModelDims = ModelDims {
        hidden: 1024,
        intermediate: 3072,
        layers: 28,
        n_heads: 16,
        kv_heads: 8,
        head_dim: 128,
        vocab: QWEN3_VOCAB,
    };

    pub const QWEN3_4B: ModelDims = ModelDims {
        hidden: 2560,
        intermediate: 9728,
        layers: 36,
        n_heads: 32,
        kv_heads: 8,
        head_dim: 128,
        vocab: QWEN3_VOCAB,
    };

    pub const QWEN3_8B: ModelDims = ModelDims {
        hidden: 4096,
        intermediate: 12288,
        layers: 36,
        n_heads: 32,
        kv_heads: 8,
        head_dim: 128,
        vocab: QWEN3_VOCAB,
    };

    pub const PRESETS: [(&'static str, ModelDims); 3] = [
        ("qwen3-0.6b", Self::QWEN3_0_6B),
        ("qwen3-4b", Self::QWEN3_4B),
        ("qwen3-8b", Self::QWEN3_8B),
    ];

    pub fn preset(name: &str) -> Result<Self> {
        Self::PRESETS
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, d)| *d)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::PRESETS.iter().map(|(n, _)| *n).collect();
                Error::Config(format!("unknown model preset `{name}` (known: {})", names.join(", ")))
            })
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.hidden,
            self.intermediate,
            self.layers,
            self.n_heads,
            self.kv_heads,
            self.head_dim,
            self.vocab,
        ];
        if fields.contains(&0) {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    /// `H_kv = kv_heads * head_dim`.
    pub fn kv_width(&self) -> u64 {
        self.kv_heads * self.head_dim
    }

    pub fn query_width(&self) -> u64 {
        self.n_heads * self.head_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostQuery {
    pub batch: u64,
    pub prompt_len: u64,
    pub response_len: u64,
}

impl CostQuery {
    /// The 128-token setting: `B = 32`, `P ~ 92`, `R = 128`.
    pub const REFERENCE_128: CostQuery = CostQuery {
        batch: 32,
        prompt_len: 92,
        response_len: 128,
    };

    pub fn total_len(&self) -> u64 {
        self.prompt_len + self.response_len
    }
}

pub fn per_token_dense_flops(dims: &ModelDims) -> f64 {
    let h = dims.hidden as f64;
    let kv = dims.kv_width() as f64;
    let i = dims.intermediate as f64;
    dims.layers as f64 * (2.0 * h * (h + 2.0 * kv) + 2.0 * h * h + 2.0 * 3.0 * h * i)
}

pub fn lm_head_flops(dims: &ModelDims) -> f64 {
    2.0 * dims.hidden as f64 * dims.vocab as f64
}

/// Attention cost of one token attending over `context` positions, all layers.
pub fn attention_flops(dims: &ModelDims, context: f64) -> f64 {
    dims.layers as f64 * 4.0 * context * dims.query_width() as f64
}

fn per_token_linear(dims: &ModelDims) -> f64 {
    per_token_dense_flops(dims) + lm_head_flops(dims)
}

/// Full-sequence causal forward pass over `L = P + R` tokens.
pub fn forward_flops(dims: &ModelDims, query: &CostQuery) -> f64 {
    let l = query.total_len() as f64;
    query.batch as f64 * l * (per_token_linear(dims) + attention_flops(dims, l / 2.0))
}

/// Prompt prefill plus `R` single-token decode steps with a KV cache.
pub fn generation_flops(dims: &ModelDims, query: &CostQuery) -> f64 {
    let b = query.batch as f64;
    let p = query.prompt_len as f64;
    let r = query.response_len as f64;
    let prefill = b * p * (per_token_linear(dims) + attention_flops(dims, p / 2.0));
    // sum_{r=1}^{R} (P + r - 1) cached positions
    let cached_positions = r * p + r * (r - 1.0) / 2.0;
    let decode = b * (r * per_token_linear(dims) + attention_flops(dims, cached_positions));
    prefill + decode
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    /// Student forward `F_s(L)`.
    pub f_s: f64,
    /// Teacher forward `F_t(L)`.
    pub f_t: f64,
    /// Student generation `G_s(P, R)`.
    pub g_s: f64,
    /// Student backward `B_s = 2 F_s`.
    pub b_s: f64,
    /// Teacher-prefix step with cached teacher logits: `3 F_s`.
    pub c_off_cached: f64,
    /// Student-prefix step: `G_s + F_t + 3 F_s`.
    pub c_on: f64,
    pub ratio: f64,
}

impl CostReport {
    pub fn from_parts(f_s: f64, f_t: f64, g_s: f64) -> Self {
        let b_s = 2.0 * f_s;
        let c_off_cached = f_s + b_s;
        let c_on = g_s + f_t + c_off_cached;
        Self {
            f_s,
            f_t,
            g_s,
            b_s,
            c_off_cached,
            c_on,
            ratio: c_on / c_off_cached,
        }
    }
}

pub fn step_costs(student: &ModelDims, teacher: &ModelDims, query: &CostQuery) -> Result<CostReport> {
    student.validate()?;
    teacher.validate()?;
    if query.batch == 0 || query.prompt_len == 0 || query.response_len == 0 {
        return Err(Error::Config(format!("batch and lengths must be positive: {query:?}")));
    }
    Ok(CostReport::from_parts(
        forward_flops(student, query),
        forward_flops(teacher, query),
        generation_flops(student, query),
    ))
}

/// Everything the `flops` command prints, as one serializable record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsSummary {
    pub student: ModelDims,
    pub teacher: ModelDims,
    pub query: CostQuery,
    pub student_dense_per_token: f64,
    pub student_head_per_token: f64,
    pub teacher_dense_per_token: f64,
    pub costs: CostReport,
}

impl FlopsSummary {
    pub fn compute(student: ModelDims, teacher: ModelDims, query: CostQuery) -> Result<Self> {
        Ok(Self {
            costs: step_costs(&student, &teacher, &query)?,
            student_dense_per_token: per_token_dense_flops(&student),
            student_head_per_token: lm_head_flops(&student),
            teacher_dense_per_token: per_token_dense_flops(&teacher),
            student,
            teacher,
            query,
        })
    }

    /// Aligned human-readable table.
    pub fn render_text(&self) -> String {
        let g = 1e9;
        let t = 1e12;
        let q = &self.query;
        let c = &self.costs;
        let rows: [(&str, String); 11] = [
            ("batch / prompt / response", format!("{} / {} / {}", q.batch, q.prompt_len, q.response_len)),
            ("student dense per token", format!("{:.3} GFLOPs", self.student_dense_per_token / g)),
            ("student LM head per token", format!("{:.3} GFLOPs", self.student_head_per_token / g)),
            ("teacher dense per token", format!("{:.3} GFLOPs", self.teacher_dense_per_token / g)),
            ("F_s student forward", format!("{:.2} TFLOPs", c.f_s / t)),
            ("B_s student backward", format!("{:.2} TFLOPs", c.b_s / t)),
            ("F_t teacher forward", format!("{:.2} TFLOPs", c.f_t / t)),
            ("G_s student generation", format!("{:.2} TFLOPs", c.g_s / t)),
            ("C_off cached teacher-prefix", format!("{:.2} TFLOPs/step", c.c_off_cached / t)),
            ("C_on student-prefix", format!("{:.2} TFLOPs/step", c.c_on / t)),
            ("C_on / C_off", format!("{:.2}", c.ratio)),
        ];
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        rows.iter()
            .map(|(k, v)| format!("{k:<width$}  {v}\n"))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("summary serializes")
    }
}
