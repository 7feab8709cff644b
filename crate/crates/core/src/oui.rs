//! Batch-based Overfitting-Underfitting Indicator.
//!
//! For a layer with `d` units probed on `B` samples, unit `j` is active on
//! sample `b` when its preactivation is strictly positive. With `s_j` the
//! number of samples activating unit `j` and `u_j = min(s_j, B - s_j)` its
//! minority count, the layer's OUI is
//!
//! ```text
//! OUI = (1/d) * sum_j u_j / floor(B/2)
//! ```
//!
//! which lies in `[0, 1]`: 0 when every unit is always on or always off, 1
//! when every unit splits the batch as evenly as possible.

use std::collections::BTreeMap;

use crate::error::{config_err, Error, Result};
use crate::nn::{self, kernels, ForwardTrace, LayerId, Network};
use crate::tensor::Tensor;

/// Binary `B x d` firing pattern of one layer on one probe batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActivationMask {
    layer: LayerId,
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl ActivationMask {
    pub fn from_bits(layer: LayerId, rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if rows == 0 || cols == 0 || bits.len() != rows * cols {
            return Err(crate::error::input_err(format!(
                "mask of {rows}x{cols} needs {} bits, got {}",
                rows * cols,
                bits.len()
            )));
        }
        Ok(Self {
            layer,
            rows,
            cols,
            bits,
        })
    }

    pub fn layer(&self) -> LayerId {
        self.layer
    }

    /// Batch size `B`.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Unit count `d`.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, sample: usize, unit: usize) -> bool {
        self.bits[sample * self.cols + unit]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// `s_j`: number of samples activating each unit.
    pub fn column_sums(&self) -> Vec<u64> {
        let mut sums = vec![0u64; self.cols];
        for row in self.bits.chunks_exact(self.cols) {
            for (s, &bit) in sums.iter_mut().zip(row) {
                *s += u64::from(bit);
            }
        }
        sums
    }
}

fn check_finite(layer: LayerId, preacts: &Tensor) -> Result<()> {
    if preacts.all_finite() {
        return Ok(());
    }
    let d = preacts.sample_len();
    let pos = preacts
        .values()
        .iter()
        .position(|v| !v.is_finite())
        .expect("non-finite entry exists");
    Err(Error::NonFiniteActivation {
        layer,
        sample: pos / d,
        unit: pos % d,
    })
}

/// Thresholds preactivations at zero. `preacts` is `[B, ...]`; trailing dims
/// are flattened into units. Exact zeros count as inactive.
pub fn activation_mask(layer: LayerId, preacts: &Tensor) -> Result<ActivationMask> {
    check_finite(layer, preacts)?;
    let bits = preacts.values().iter().map(|&v| v > 0.0).collect();
    ActivationMask::from_bits(layer, preacts.batch(), preacts.sample_len(), bits)
}

/// Per-unit activation counts straight from preactivations, without
/// materializing the mask. Equal to `activation_mask(..).column_sums()`.
pub fn unit_counts(layer: LayerId, preacts: &Tensor) -> Result<Vec<u64>> {
    let d = preacts.sample_len();
    let mut counts = vec![0u64; d];
    let mut non_finite = false;
    for row in preacts.values().chunks_exact(d) {
        non_finite |= kernels::count_positive(row, &mut counts);
    }
    if non_finite {
        check_finite(layer, preacts)?;
    }
    Ok(counts)
}

/// OUI from per-unit activation counts over a batch of `batch` samples.
pub fn oui_from_counts(batch: usize, counts: &[u64]) -> Result<f64> {
    if batch < 2 {
        return Err(Error::ProbeBatchTooSmall { batch });
    }
    if counts.is_empty() {
        return Err(crate::error::input_err("layer has no units"));
    }
    let b = batch as u64;
    let minority: u64 = counts.iter().map(|&s| s.min(b - s)).sum();
    let half = b / 2;
    Ok(minority as f64 / (counts.len() as u64 * half) as f64)
}

pub fn layer_oui(mask: &ActivationMask) -> Result<f64> {
    oui_from_counts(mask.rows(), &mask.column_sums())
}

/// Per-layer OUI values at one step, with their extrema.
#[derive(Clone, Debug, PartialEq)]
pub struct OuiReport {
    step: u64,
    values: BTreeMap<LayerId, f64>,
    extrema: Option<(f64, f64)>,
}

impl OuiReport {
    pub fn new(step: u64, values: BTreeMap<LayerId, f64>) -> Result<Self> {
        if let Some((id, v)) = values.iter().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Scheduler(format!("OUI of layer {id} is {v}, outside [0, 1]")));
        }
        let extrema = values.values().fold(None, |acc: Option<(f64, f64)>, &v| {
            Some(acc.map_or((v, v), |(lo, hi)| (lo.min(v), hi.max(v))))
        });
        Ok(Self {
            step,
            values,
            extrema,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn values(&self) -> &BTreeMap<LayerId, f64> {
        &self.values
    }

    pub fn get(&self, layer: LayerId) -> Option<f64> {
        self.values.get(&layer).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn oui_min(&self) -> Option<f64> {
        self.extrema.map(|(lo, _)| lo)
    }

    pub fn oui_max(&self) -> Option<f64> {
        self.extrema.map(|(_, hi)| hi)
    }
}

/// Builds a report from the preactivations captured on a forward trace,
/// reusing the unit counts gathered during the pass when present.
pub fn report_from_trace(trace: &ForwardTrace, step: u64) -> Result<OuiReport> {
    let mut values = BTreeMap::new();
    for (layer, preacts) in trace.preactivations() {
        let counts = match trace.fused_counts(layer) {
            Some(f) if !f.non_finite => f.counts.clone(),
            _ => unit_counts(layer, preacts)?,
        };
        values.insert(layer, oui_from_counts(preacts.batch(), &counts)?);
    }
    if values.is_empty() {
        return Err(config_err("trace holds no captured preactivations"));
    }
    OuiReport::new(step, values)
}

/// Runs a capture-enabled forward pass on `batch` and measures every
/// monitored layer. Parameters are not touched.
pub fn probe(net: &Network, batch: &Tensor, step: u64) -> Result<OuiReport> {
    if net.monitored_layers().is_empty() {
        return Err(config_err("network has no monitored layers"));
    }
    if batch.batch() < 2 {
        return Err(Error::ProbeBatchTooSmall {
            batch: batch.batch(),
        });
    }
    let trace = nn::forward(net, batch, true)?;
    report_from_trace(&trace, step)
}
