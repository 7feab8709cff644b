//! Desk-scale training lab for activation-driven, layer-wise weight decay.
//!
//! The batch OUI metric ([`oui`]) scores how evenly each ReLU unit splits a
//! batch. The OUIDecay scheduler ([`decay`]) turns per-layer scores into
//! per-layer decay coefficients, applied by Adam or AdamW ([`optim`]).
//! Fixed decay and AdaDecay are available as baselines, and [`harness`]
//! runs seeded comparisons.

pub mod data;
pub mod decay;
pub mod error;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod oui;
pub mod tensor;

pub use data::Dataset;
pub use decay::{DecayAssignment, DecayMode, SchedulerConfig};
pub use error::{Error, LoadError, Result};
pub use nn::{ForwardTrace, Gradients, LayerId, LayerParams, LayerSpec, Network};
pub use optim::{AdamConfig, Decay, LrSchedule, OptimizerKind, OptimizerState};
pub use oui::{ActivationMask, OuiReport};
pub use tensor::Tensor;
