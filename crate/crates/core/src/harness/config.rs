//! Run configuration, read from TOML. Unknown keys are rejected.
//!
//! ```toml
//! name = "glyph-cnn"
//! seeds = [1, 2, 3]
//! epochs = 4
//! batch_size = 64
//!
//! [data]
//! val_fraction = 0.2
//! [data.source]
//! kind = "glyphs"
//! n = 10000
//! classes = 10
//! noise = 0.8
//! size = 12
//!
//! [[model.layers]]
//! kind = "conv2d"
//! in_channels = 1
//! out_channels = 16
//! kernel = 3
//! padding = 1
//! # ...
//!
//! [optimizer]
//! kind = "adamw"
//! base_lr = 3e-3
//! min_lr = 3e-5
//! warmup_steps = 50
//!
//! [scheduler]
//! mode = "ouidecay"
//! lambda_base = 1e-2
//! t_tilde = 25
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, SyntheticKind};
use crate::decay::{DecayMode, SchedulerConfig};
use crate::error::{config_err, Result};
use crate::nn::LayerSpec;
use crate::optim::{AdamConfig, OptimizerKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

fn default_val_fraction() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Seeds dataset generation and the train/validation split. Kept apart
    /// from run seeds so every run of a config sees the same data.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub hflip: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Blobs {
        n: usize,
        classes: usize,
        noise: f64,
        features: usize,
    },
    Spirals {
        n: usize,
        classes: usize,
        noise: f64,
    },
    Glyphs {
        n: usize,
        classes: usize,
        noise: f64,
        size: usize,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

impl DataSource {
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match *self {
            DataSource::Blobs {
                n,
                classes,
                noise,
                features,
            } => data::gen_synthetic(SyntheticKind::Blobs { features }, n, classes, noise, seed),
            DataSource::Spirals { n, classes, noise } => {
                data::gen_synthetic(SyntheticKind::Spirals, n, classes, noise, seed)
            }
            DataSource::Glyphs {
                n,
                classes,
                noise,
                size,
            } => data::gen_synthetic(SyntheticKind::Glyphs { size }, n, classes, noise, seed),
            DataSource::Idx {
                ref images,
                ref labels,
            } => data::load_idx(images, labels),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: Vec<LayerSpec>,
}

fn default_beta1() -> f64 {
    AdamConfig::default().beta1
}
fn default_beta2() -> f64 {
    AdamConfig::default().beta2
}
fn default_adam_eps() -> f64 {
    AdamConfig::default().epsilon
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub base_lr: f64,
    pub min_lr: f64,
    #[serde(default)]
    pub warmup_steps: u64,
    /// Global gradient-norm clipping; off when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub epsilon: f64,
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSource {
    /// Reuse the mini-batch of the tick step; OUI comes from its forward pass.
    #[default]
    TrainingBatch,
    /// A fixed batch drawn once from the training split.
    FixedBatch,
}

fn default_probe_batch() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default)]
    pub source: ProbeSource,
    /// Size of the fixed probe batch (ignored for `training_batch`).
    #[serde(default = "default_probe_batch")]
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            source: ProbeSource::default(),
            batch_size: default_probe_batch(),
        }
    }
}

/// Update-interval grid of the interval ablation.
pub const T_TILDE_GRID: [u64; 8] = [1, 4, 16, 64, 128, 256, 512, 1024];
/// Scaling-range grid of the scaling ablation.
pub const SCALING_GRID: [(f64, f64); 4] = [(0.67, 5.0), (0.67, 3.0), (0.33, 3.0), (0.33, 5.0)];

fn default_t_grid() -> Vec<u64> {
    T_TILDE_GRID.to_vec()
}
fn default_scaling_grid() -> Vec<(f64, f64)> {
    SCALING_GRID.to_vec()
}
fn default_modes() -> Vec<DecayMode> {
    DecayMode::ALL.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_t_grid")]
    pub t_tilde: Vec<u64>,
    #[serde(default = "default_scaling_grid")]
    pub scaling: Vec<(f64, f64)>,
    /// Modes compared by the `lambda_pair` axis.
    #[serde(default = "default_modes")]
    pub modes: Vec<DecayMode>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            t_tilde: default_t_grid(),
            scaling: default_scaling_grid(),
            modes: default_modes(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a config file; relative IDX paths resolve against its directory.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let DataSource::Idx { images, labels } = &mut cfg.data.source {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [images, labels] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(config_err("name must not be empty"));
        }
        if self.seeds.is_empty() {
            return Err(config_err("seed list must not be empty"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err("epochs and batch_size must be positive"));
        }
        if self.model.layers.is_empty() {
            return Err(config_err("model has no layers"));
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) || self.data.val_fraction == 0.0 {
            return Err(config_err("data.val_fraction must be in (0, 1)"));
        }
        if self.probe.batch_size < 2 {
            return Err(config_err("probe.batch_size must be at least 2"));
        }
        if let Some(c) = self.optimizer.clip_norm {
            if !(c > 0.0) {
                return Err(config_err("optimizer.clip_norm must be positive"));
            }
        }
        self.scheduler.validate()
    }

    /// The nominal config and its copy with `lambda_base` multiplied by 5.
    pub fn lambda_pair(&self) -> [RunConfig; 2] {
        let mut high = self.clone();
        high.scheduler.lambda_base = self.scheduler.lambda_base * 5.0;
        [self.clone(), high]
    }
}
