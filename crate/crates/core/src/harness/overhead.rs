//! Cost of the OUI tick relative to a full training iteration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::run::{prepare_data, Trainer};
use crate::data;
use crate::decay::DecayMode;
use crate::error::{config_err, Error, Result};

/// Fewest ticks a measurement must observe.
pub const MIN_TICKS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    /// Mean wall time of a full training iteration.
    pub iter_ms: f64,
    /// Mean wall time of the tick work (OUI measurement and decay assignment).
    pub tick_ms: f64,
    /// `100 * tick_ms / iter_ms`.
    pub pct: f64,
    pub ticks: usize,
    pub steps: u64,
}

impl TimingReport {
    pub fn from_means(iter_ms: f64, tick_ms: f64, ticks: usize, steps: u64) -> Self {
        Self {
            iter_ms,
            tick_ms,
            pct: 100.0 * tick_ms / iter_ms,
            ticks,
            steps,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(
            path,
            format!("iter_ms,tick_ms,pct\n{},{},{}\n", self.iter_ms, self.tick_ms, self.pct),
        )?;
        Ok(())
    }
}

/// Trains the first seed of `cfg` for up to `max_steps` steps (default: the
/// full schedule) and times every iteration and every tick.
pub fn measure_overhead(cfg: &RunConfig, max_steps: Option<u64>) -> Result<TimingReport> {
    if cfg.scheduler.mode != DecayMode::OuiDecay {
        return Err(config_err(format!(
            "overhead measurement needs ouidecay mode, got {}",
            cfg.scheduler.mode
        )));
    }
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let seed = cfg.seeds[0];
    let mut trainer = Trainer::new(cfg, seed, &data)?;
    let limit = max_steps.unwrap_or(u64::MAX).min(trainer.total_steps());

    let mut iter_total = 0.0;
    let mut tick_total = 0.0;
    let mut ticks = 0usize;
    'outer: for epoch in 0..cfg.epochs as u64 {
        for (x, y) in data::batches(&data.train, cfg.batch_size, seed, epoch)? {
            if trainer.step() >= limit {
                break 'outer;
            }
            let o = trainer.train_step(&x, &y)?;
            iter_total += o.iter_time.as_secs_f64() * 1e3;
            if let Some(t) = o.tick_time {
                tick_total += t.as_secs_f64() * 1e3;
                ticks += 1;
            }
        }
    }
    if ticks < MIN_TICKS {
        return Err(Error::InsufficientTicks {
            observed: ticks,
            required: MIN_TICKS,
        });
    }
    let steps = trainer.step();
    Ok(TimingReport::from_means(
        iter_total / steps as f64,
        tick_total / ticks as f64,
        ticks,
        steps,
    ))
}
