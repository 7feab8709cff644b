//! Layer-wise weight-decay schedulers: fixed, OUIDecay and an
//! AdaDecay-style gradient-driven baseline.
//!
//! OUIDecay rescales the base coefficient per layer from the relative
//! position of that layer's OUI between the network-wide extrema:
//!
//! ```text
//! lambda_i = lambda_base * (s1 + (s2 - s1) * (OUI_i - OUI_min) / (OUI_max - OUI_min + eps))
//! ```
//!
//! and refreshes the assignment every `t_tilde` steps, holding it in between.
//! Biases are never decayed.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::nn::{LayerId, Network};
use crate::oui::{self, OuiReport};
use crate::tensor::Tensor;

/// Variance guard for the per-layer gradient z-score.
pub const ADADECAY_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DecayMode {
    #[serde(rename = "fixed")]
    Fixed,
    #[serde(rename = "adadecay")]
    AdaDecay,
    #[serde(rename = "ouidecay")]
    OuiDecay,
}

impl DecayMode {
    pub const ALL: [DecayMode; 3] = [DecayMode::Fixed, DecayMode::AdaDecay, DecayMode::OuiDecay];

    pub fn as_str(self) -> &'static str {
        match self {
            DecayMode::Fixed => "fixed",
            DecayMode::AdaDecay => "adadecay",
            DecayMode::OuiDecay => "ouidecay",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

impl fmt::Display for DecayMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_t_tilde() -> u64 {
    500
}
fn default_s1() -> f64 {
    0.67
}
fn default_s2() -> f64 {
    5.0
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_alpha() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerConfig {
    pub mode: DecayMode,
    pub lambda_base: f64,
    /// Update interval in optimizer steps.
    #[serde(default = "default_t_tilde")]
    pub t_tilde: u64,
    #[serde(default = "default_s1")]
    pub s1: f64,
    #[serde(default = "default_s2")]
    pub s2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_alpha")]
    pub adadecay_alpha: f64,
    /// When every layer reports the same OUI, assign `lambda_base` instead of
    /// `s1 * lambda_base`.
    #[serde(default)]
    pub uniform_fallback: bool,
    /// Count scheduler steps from 0, so the first tick fires on the very
    /// first training step instead of step `t_tilde`.
    #[serde(default)]
    pub zero_based_steps: bool,
}

impl SchedulerConfig {
    /// Defaults: `s1 = 0.67`, `s2 = 5`, `t_tilde = 500`, `epsilon = 1e-8`.
    pub fn new(mode: DecayMode, lambda_base: f64) -> Self {
        Self {
            mode,
            lambda_base,
            t_tilde: default_t_tilde(),
            s1: default_s1(),
            s2: default_s2(),
            epsilon: default_epsilon(),
            adadecay_alpha: default_alpha(),
            uniform_fallback: false,
            zero_based_steps: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_base.is_finite() && self.lambda_base >= 0.0) {
            return Err(config_err(format!("lambda_base must be >= 0, got {}", self.lambda_base)));
        }
        if self.t_tilde == 0 {
            return Err(config_err("t_tilde must be at least 1"));
        }
        if !(self.s1 > 0.0 && self.s1.is_finite() && self.s2.is_finite() && self.s2 >= self.s1) {
            return Err(config_err(format!(
                "scaling range must satisfy 0 < s1 <= s2, got ({}, {})",
                self.s1, self.s2
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(config_err("epsilon must be positive"));
        }
        if !(self.adadecay_alpha > 0.0 && self.adadecay_alpha.is_finite()) {
            return Err(config_err("adadecay_alpha must be positive"));
        }
        Ok(())
    }

    /// Whether the 1-based training step `step` is a scheduler tick.
    pub fn is_tick(&self, step: u64) -> bool {
        let counter = if self.zero_based_steps {
            step.wrapping_sub(1)
        } else {
            step
        };
        counter % self.t_tilde == 0
    }
}

/// Per-layer decay coefficients in force from `step` on.
#[derive(Clone, Debug, PartialEq)]
pub struct DecayAssignment {
    step: u64,
    lambdas: BTreeMap<LayerId, f64>,
}

impl DecayAssignment {
    pub fn new(step: u64, lambdas: BTreeMap<LayerId, f64>) -> Self {
        Self { step, lambdas }
    }

    pub fn uniform(layers: impl IntoIterator<Item = LayerId>, lambda: f64, step: u64) -> Self {
        Self {
            step,
            lambdas: layers.into_iter().map(|id| (id, lambda)).collect(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn get(&self, layer: LayerId) -> Option<f64> {
        self.lambdas.get(&layer).copied()
    }

    pub fn lambdas(&self) -> &BTreeMap<LayerId, f64> {
        &self.lambdas
    }
}

/// Maps an OUI report to per-layer coefficients for the reported layers.
pub fn assign_decay(report: &OuiReport, cfg: &SchedulerConfig) -> Result<DecayAssignment> {
    if cfg.mode != DecayMode::OuiDecay {
        return Err(Error::Scheduler(format!(
            "assign_decay requires ouidecay mode, got {}",
            cfg.mode
        )));
    }
    let (Some(lo), Some(hi)) = (report.oui_min(), report.oui_max()) else {
        return Err(Error::Scheduler("empty OUI report".into()));
    };
    let spread = hi - lo;
    let lambdas = report
        .values()
        .iter()
        .map(|(&id, &v)| {
            let factor = if cfg.uniform_fallback && spread == 0.0 {
                1.0
            } else {
                let frac = (v - lo) / (spread + cfg.epsilon);
                (cfg.s1 + (cfg.s2 - cfg.s1) * frac).clamp(cfg.s1, cfg.s2)
            };
            (id, cfg.lambda_base * factor)
        })
        .collect();
    Ok(DecayAssignment::new(report.step(), lambdas))
}

/// Full assignment for every parameterized layer: OUI-driven values for the
/// reported layers, `lambda_base` for the rest.
pub fn assignment_from_report(
    report: &OuiReport,
    cfg: &SchedulerConfig,
    param_layers: &[LayerId],
) -> Result<DecayAssignment> {
    let mut a = assign_decay(report, cfg)?;
    for &id in param_layers {
        a.lambdas.entry(id).or_insert(cfg.lambda_base);
    }
    Ok(a)
}

/// One step of the scheduling loop. In OUIDecay mode a tick probes the
/// network on `probe_batch` and reassigns; off-tick steps return `current`
/// unchanged. Fixed and AdaDecay modes always return uniform `lambda_base`
/// (AdaDecay modulates per parameter in the optimizer instead).
pub fn scheduler_tick(
    step: u64,
    net: &Network,
    probe_batch: &Tensor,
    cfg: &SchedulerConfig,
    current: &DecayAssignment,
) -> Result<DecayAssignment> {
    if step == 0 {
        return Err(Error::Scheduler("training steps are counted from 1".into()));
    }
    match cfg.mode {
        DecayMode::Fixed | DecayMode::AdaDecay => Ok(DecayAssignment::uniform(
            net.param_layers(),
            cfg.lambda_base,
            step,
        )),
        DecayMode::OuiDecay if cfg.is_tick(step) => {
            let report = oui::probe(net, probe_batch, step)?;
            assignment_from_report(&report, cfg, &net.param_layers())
        }
        DecayMode::OuiDecay => Ok(current.clone()),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-parameter decay multipliers `2 * sigmoid(alpha * z)` where `z` is the
/// z-score of `|g|` within its layer (population std). Layers whose gradient
/// magnitudes are all equal get multipliers of exactly 1.
pub fn adadecay_factors(
    grads: &BTreeMap<LayerId, Tensor>,
    alpha: f64,
) -> Result<BTreeMap<LayerId, Vec<f64>>> {
    if !(alpha > 0.0) {
        return Err(config_err("adadecay alpha must be positive"));
    }
    let mut out = BTreeMap::new();
    for (&id, g) in grads {
        let mags: Vec<f64> = g.values().iter().map(|v| v.abs()).collect();
        let (lo, hi) = mags
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &m| (lo.min(m), hi.max(m)));
        let factors = if lo == hi {
            vec![1.0; mags.len()]
        } else {
            let n = mags.len() as f64;
            let mean = mags.iter().sum::<f64>() / n;
            let var = mags.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / n;
            let denom = var.sqrt() + ADADECAY_EPS;
            mags.iter()
                .map(|m| 2.0 * sigmoid(alpha * (m - mean) / denom))
                .collect()
        };
        out.insert(id, factors);
    }
    Ok(out)
}
