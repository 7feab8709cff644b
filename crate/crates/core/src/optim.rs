//! Adam / AdamW with layer-wise decay, and the warmup-plus-cosine schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::decay::DecayAssignment;
use crate::error::{config_err, Result};
use crate::nn::{Gradients, LayerId, LayerParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Weight decay folded into the gradient as an L2 term.
    Adam,
    /// Decoupled weight decay: a direct shrink of the weights.
    AdamW,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Decay coefficients for one optimizer step. Biases are never decayed.
#[derive(Clone, Copy, Debug)]
pub enum Decay<'a> {
    /// One coefficient per parameterized layer.
    Layer(&'a DecayAssignment),
    /// `lambda_base * multiplier` per weight entry.
    PerParameter {
        lambda_base: f64,
        multipliers: &'a BTreeMap<LayerId, Vec<f64>>,
    },
}

#[derive(Clone, Debug)]
struct Moments {
    m_w: Vec<f64>,
    v_w: Vec<f64>,
    m_b: Vec<f64>,
    v_b: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    kind: OptimizerKind,
    cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<LayerId, Moments>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, cfg: AdamConfig) -> Self {
        Self {
            kind,
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Number of steps applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn apply_step(
        &mut self,
        params: &mut BTreeMap<LayerId, LayerParams>,
        grads: &Gradients,
        lr: f64,
        decay: Decay<'_>,
    ) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(config_err(format!("learning rate must be >= 0, got {lr}")));
        }
        for (id, p) in params.iter() {
            let g = grads
                .params
                .get(id)
                .ok_or_else(|| config_err(format!("missing gradient for layer {id}")))?;
            if g.weight.len() != p.weight.len() || g.bias.len() != p.bias.len() {
                return Err(config_err(format!("gradient shape mismatch for layer {id}")));
            }
            match decay {
                Decay::Layer(a) => {
                    a.get(*id)
                        .ok_or_else(|| config_err(format!("no decay coefficient for layer {id}")))?;
                }
                Decay::PerParameter { multipliers, .. } => {
                    let m = multipliers
                        .get(id)
                        .ok_or_else(|| config_err(format!("no decay multipliers for layer {id}")))?;
                    if m.len() != p.weight.len() {
                        return Err(config_err(format!("decay multiplier count mismatch for layer {id}")));
                    }
                }
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let kind = self.kind;

        for (id, p) in params.iter_mut() {
            let g = &grads.params[id];
            let mo = self.moments.entry(*id).or_insert_with(|| Moments {
                m_w: vec![0.0; p.weight.len()],
                v_w: vec![0.0; p.weight.len()],
                m_b: vec![0.0; p.bias.len()],
                v_b: vec![0.0; p.bias.len()],
            });
            let lambda_at = |k: usize| match decay {
                Decay::Layer(a) => a.get(*id).expect("checked above"),
                Decay::PerParameter {
                    lambda_base,
                    multipliers,
                } => lambda_base * multipliers[id][k],
            };

            let w = p.weight.values_mut();
            for (k, (wk, &gk)) in w.iter_mut().zip(g.weight.values()).enumerate() {
                let lambda = lambda_at(k);
                let grad = match kind {
                    OptimizerKind::Adam => gk + lambda * *wk,
                    OptimizerKind::AdamW => {
                        *wk *= 1.0 - lr * lambda;
                        gk
                    }
                };
                adam_update(wk, grad, &mut mo.m_w[k], &mut mo.v_w[k], lr, bc1, bc2, &c);
            }
            let b = p.bias.values_mut();
            for (k, (bk, &gk)) in b.iter_mut().zip(g.bias.values()).enumerate() {
                adam_update(bk, gk, &mut mo.m_b[k], &mut mo.v_b[k], lr, bc1, bc2, &c);
            }
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn adam_update(w: &mut f64, g: f64, m: &mut f64, v: &mut f64, lr: f64, bc1: f64, bc2: f64, c: &AdamConfig) {
    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
    let m_hat = *m / bc1;
    let v_hat = *v / bc2;
    *w -= lr * m_hat / (v_hat.sqrt() + c.epsilon);
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Linear warmup from 0 to `base_lr`, then cosine annealing to `min_lr`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    base_lr: f64,
    min_lr: f64,
    warmup_steps: u64,
    total_steps: u64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, min_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if !(min_lr >= 0.0 && min_lr <= base_lr && base_lr.is_finite()) {
            return Err(config_err(format!(
                "learning rates must satisfy 0 <= min_lr <= base_lr, got {min_lr} and {base_lr}"
            )));
        }
        if warmup_steps >= total_steps {
            return Err(config_err(format!(
                "warmup_steps ({warmup_steps}) must be below total_steps ({total_steps})"
            )));
        }
        Ok(Self {
            base_lr,
            min_lr,
            warmup_steps,
            total_steps,
        })
    }

    pub fn base_lr(&self) -> f64 {
        self.base_lr
    }

    pub fn min_lr(&self) -> f64 {
        self.min_lr
    }

    pub fn warmup_steps(&self) -> u64 {
        self.warmup_steps
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step > self.total_steps {
            log::warn!(
                "lr requested at step {step} past the schedule end {}; using min_lr",
                self.total_steps
            );
            return self.min_lr;
        }
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        let c = 0.5 * (1.0 + (PI * progress).cos());
        self.base_lr * c + self.min_lr * (1.0 - c)
    }
}
