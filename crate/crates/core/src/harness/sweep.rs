//! Ablation sweeps over the update interval, the scaling range, or a pair of
//! base decay values.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::run::{prepare_data, run_prepared, RunRecord};
use super::summary::{mean_std, summarize, Summary};
use crate::decay::DecayMode;
use crate::error::{config_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum SweepAxis {
    TTilde(Vec<u64>),
    Scaling(Vec<(f64, f64)>),
    /// The config's `lambda_base` and five times it, under each listed mode.
    LambdaPair(Vec<DecayMode>),
}

impl SweepAxis {
    pub const NAMES: [&'static str; 3] = ["t_tilde", "scaling", "lambda_pair"];

    /// Builds an axis from its name and the grids of the config's `[sweep]`.
    pub fn from_name(name: &str, cfg: &RunConfig) -> Result<Self> {
        match name {
            "t_tilde" => Ok(Self::TTilde(cfg.sweep.t_tilde.clone())),
            "scaling" => Ok(Self::Scaling(cfg.sweep.scaling.clone())),
            "lambda_pair" => Ok(Self::LambdaPair(cfg.sweep.modes.clone())),
            other => Err(config_err(format!(
                "unknown sweep axis {other:?}; expected one of {}",
                Self::NAMES.join(", ")
            ))),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::TTilde(v) => v.len(),
            Self::Scaling(v) => v.len(),
            Self::LambdaPair(m) => 2 * m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(label, config)` for every axis point.
    pub fn points(&self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        match self {
            Self::TTilde(values) => values
                .iter()
                .map(|&t| {
                    let label = format!("t_tilde={t}");
                    let mut cfg = base.clone();
                    cfg.scheduler.t_tilde = t;
                    cfg.name = format!("{}/{label}", base.name);
                    (label, cfg)
                })
                .collect(),
            Self::Scaling(pairs) => pairs
                .iter()
                .map(|&(s1, s2)| {
                    let label = format!("s1={s1},s2={s2}");
                    let mut cfg = base.clone();
                    cfg.scheduler.s1 = s1;
                    cfg.scheduler.s2 = s2;
                    cfg.name = format!("{}/{label}", base.name);
                    (label, cfg)
                })
                .collect(),
            Self::LambdaPair(modes) => base
                .lambda_pair()
                .iter()
                .flat_map(|c| {
                    modes.iter().map(move |&mode| {
                        let mut cfg = c.clone();
                        cfg.scheduler.mode = mode;
                        (format!("lambda_base={:e},mode={mode}", cfg.scheduler.lambda_base), cfg)
                    })
                })
                .collect(),
        }
    }
}

/// Per-point aggregate: best-loss statistics and summed wall time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub label: String,
    pub runs: usize,
    pub mean_best_val_loss: f64,
    pub std_best_val_loss: f64,
    pub total_runtime_s: f64,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub records: Vec<RunRecord>,
    pub summary: Summary,
    pub points: Vec<SweepPoint>,
}

fn dir_name(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

/// Runs every axis point for every seed, sequentially. Writes per-run files
/// under `out/<point>/seed_<n>/`, plus `summary.csv`, `summary.txt` and
/// `sweep.csv` in `out`.
pub fn sweep(base: &RunConfig, axis: &SweepAxis, out: &Path) -> Result<SweepOutcome> {
    if axis.is_empty() {
        return Err(config_err("sweep axis has no points"));
    }
    base.validate()?;
    let points = axis.points(base);
    for (_, cfg) in &points {
        cfg.validate()?;
    }
    let data = prepare_data(base)?;
    fs::create_dir_all(out)?;

    let mut records = Vec::new();
    let mut summaries = Vec::new();
    for (label, cfg) in &points {
        let mut point_records = Vec::new();
        for &seed in &cfg.seeds {
            let dir = out.join(dir_name(label)).join(format!("seed_{seed}"));
            log::info!("sweep point {label}, seed {seed}");
            point_records.push(run_prepared(cfg, seed, &data, &dir)?);
        }
        let losses: Vec<f64> = point_records.iter().map(|r| r.best_val_loss).collect();
        let (mean, std) = mean_std(&losses).expect("seed list is non-empty");
        summaries.push(SweepPoint {
            label: label.clone(),
            runs: point_records.len(),
            mean_best_val_loss: mean,
            std_best_val_loss: std,
            total_runtime_s: point_records.iter().map(|r| r.total_time_s).sum(),
        });
        records.extend(point_records);
    }

    let summary = summarize(&records)?;
    summary.write_csv(&out.join("summary.csv"))?;
    fs::write(out.join("summary.txt"), summary.render_table())?;
    let mut csv = String::from("point,runs,mean_best_val_loss,std_best_val_loss,total_runtime_s\n");
    for p in &summaries {
        writeln!(
            csv,
            "\"{}\",{},{},{},{}",
            p.label, p.runs, p.mean_best_val_loss, p.std_best_val_loss, p.total_runtime_s
        )
        .expect("writing to a String");
    }
    fs::write(out.join("sweep.csv"), csv)?;

    Ok(SweepOutcome {
        records,
        summary,
        points: summaries,
    })
}
