//! Entropy-gated length curriculum.
//!
//! Training starts at the shortest horizon of a ladder and moves one rung up
//! only when the held-out mean per-token entropy is at least `h_min`. A
//! reading below the gate either stops training or freezes the horizon where
//! it is, depending on [`OnFail`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnFail {
    Terminate,
    #[default]
    HoldAtLastStable,
}

impl std::str::FromStr for OnFail {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "terminate" => Ok(OnFail::Terminate),
            "hold" | "hold_at_last_stable" => Ok(OnFail::HoldAtLastStable),
            other => Err(Error::Config(format!("unknown on_fail policy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumConfig {
    /// Strictly increasing horizon ladder, in tokens.
    pub horizons: Vec<usize>,
    /// Entropy gate in nats.
    pub h_min: f64,
    #[serde(default)]
    pub on_fail: OnFail,
    /// Training steps between gate evaluations.
    pub check_interval: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            horizons: vec![128, 256, 512, 1024, 2048, 4096],
            h_min: 0.2,
            on_fail: OnFail::HoldAtLastStable,
            check_interval: 50,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizons.is_empty() {
            return Err(Error::Config("curriculum needs at least one horizon".into()));
        }
        if self.horizons[0] == 0 || self.horizons.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "horizons must be positive and strictly increasing: {:?}",
                self.horizons
            )));
        }
        if !(self.h_min >= 0.0 && self.h_min.is_finite()) {
            return Err(Error::Config(format!("h_min must be a finite non-negative value, got {}", self.h_min)));
        }
        if self.check_interval == 0 {
            return Err(Error::Config("check_interval must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurriculumStatus {
    Running,
    Frozen,
    Terminated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Advance,
    /// Gate open but already at the last rung.
    Hold,
    Freeze,
    Terminate,
}

impl std::fmt::Display for Decision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Decision::Advance => "advance",
            Decision::Hold => "hold",
            Decision::Freeze => "freeze",
            Decision::Terminate => "terminate",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub step: usize,
    pub entropy: f64,
    /// Horizon in force when the observation was taken.
    pub horizon: usize,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    stage: usize,
    status: CurriculumStatus,
    entropy_history: Vec<Observation>,
}

impl Default for CurriculumState {
    fn default() -> Self {
        Self::new()
    }
}

impl CurriculumState {
    pub fn new() -> Self {
        Self {
            stage: 0,
            status: CurriculumStatus::Running,
            entropy_history: Vec::new(),
        }
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn status(&self) -> CurriculumStatus {
        self.status
    }

    pub fn history(&self) -> &[Observation] {
        &self.entropy_history
    }

    pub fn current_horizon(&self, config: &CurriculumConfig) -> usize {
        config.horizons[self.stage]
    }

    /// Feeds one held-out entropy reading taken at `step` through the gate.
    pub fn observe(&mut self, config: &CurriculumConfig, step: usize, held_out_entropy: f64) -> Result<Decision> {
        if self.status != CurriculumStatus::Running {
            return Err(Error::CurriculumStopped(format!("{:?}", self.status)));
        }
        if held_out_entropy.is_nan() {
            return Err(Error::NonFinite("held-out entropy is NaN".into()));
        }
        let horizon = self.current_horizon(config);
        let decision = if held_out_entropy >= config.h_min {
            if self.stage + 1 < config.horizons.len() {
                self.stage += 1;
                Decision::Advance
            } else {
                Decision::Hold
            }
        } else {
            match config.on_fail {
                OnFail::HoldAtLastStable => {
                    self.status = CurriculumStatus::Frozen;
                    Decision::Freeze
                }
                OnFail::Terminate => {
                    self.status = CurriculumStatus::Terminated;
                    Decision::Terminate
                }
            }
        };
        self.entropy_history.push(Observation {
            step,
            entropy: held_out_entropy,
            horizon,
            decision,
        });
        Ok(decision)
    }
}

/// One line of a simulated decision trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub index: usize,
    pub entropy: f64,
    pub decision: Decision,
    pub horizon_after: usize,
}

/// Runs the gate over an entropy series (one reading per check interval)
/// until the series ends or the curriculum stops.
pub fn simulate(config: &CurriculumConfig, entropies: &[f64]) -> Result<(CurriculumState, Vec<TraceEntry>)> {
    config.validate()?;
    let mut state = CurriculumState::new();
    let mut trace = Vec::with_capacity(entropies.len());
    for (index, &entropy) in entropies.iter().enumerate() {
        if state.status() != CurriculumStatus::Running {
            break;
        }
        let decision = state.observe(config, (index + 1) * config.check_interval, entropy)?;
        trace.push(TraceEntry {
            index,
            entropy,
            decision,
            horizon_after: state.current_horizon(config),
        });
    }
    Ok((state, trace))
}

/// Fixed-format trace, one decision per line.
pub fn render_trace(config: &CurriculumConfig, state: &CurriculumState, trace: &[TraceEntry]) -> String {
    let mut out = String::from("index  entropy     decision   horizon\n");
    for e in trace {
        out.push_str(&format!(
            "{:>5}  {:<10.6}  {:<9}  {:>7}\n",
            e.index, e.entropy, e.decision, e.horizon_after
        ));
    }
    out.push_str(&format!(
        "final: horizon {} status {:?} after {} observation(s)\n",
        state.current_horizon(config),
        state.status(),
        trace.len()
    ));
    out
}

/// Parses one reading per line; blank lines and `#` comments are skipped.
pub fn parse_entropy_series(text: &str) -> Result<Vec<f64>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.parse::<f64>()
                .map_err(|e| Error::Config(format!("bad entropy reading `{l}`: {e}")))
        })
        .collect()
}
