//! Seeded training runs.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ProbeSource, RunConfig};
use crate::data::{self, Dataset};
use crate::decay::{self, DecayAssignment, DecayMode};
use crate::error::{config_err, Error, Result};
use crate::nn::{self, LayerId, Network};
use crate::optim::{self, Decay, LrSchedule, OptimizerState};
use crate::oui::{self, OuiReport};
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 256;
const HFLIP_STREAM: u64 = 0x6f75_6964;

/// Normalized train/validation split of a config's dataset.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Dataset,
    pub val: Dataset,
}

/// Loads, splits and normalizes the dataset. Normalization statistics come
/// from the training split only.
pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let full = cfg.data.source.load(cfg.data.seed)?;
    let (train, val) = full.split(cfg.data.val_fraction, cfg.data.seed)?;
    let stats = train.fit_normalization();
    Ok(PreparedData {
        train: train.normalized(&stats)?,
        val: val.normalized(&stats)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub epoch_time_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuiSample {
    pub step: u64,
    pub layer: LayerId,
    pub oui: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSample {
    pub step: u64,
    pub layer: LayerId,
    pub lambda: f64,
}

/// Wall time of one tick step and of its OUI-plus-assignment part.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickTiming {
    pub step: u64,
    pub iter_ms: f64,
    pub tick_ms: f64,
}

impl TickTiming {
    pub fn pct(&self) -> f64 {
        100.0 * self.tick_ms / self.iter_ms
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: String,
    pub mode: DecayMode,
    pub lambda_base: f64,
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub final_train_acc: f64,
    pub steps: u64,
    pub total_time_s: f64,
    #[serde(default)]
    pub tick_timings: Vec<TickTiming>,
    #[serde(skip)]
    pub oui_trace: Vec<OuiSample>,
    #[serde(skip)]
    pub lambda_trace: Vec<LambdaSample>,
}

pub(crate) struct StepOutcome {
    pub loss: f64,
    pub batch: usize,
    pub report: Option<OuiReport>,
    pub tick_time: Option<Duration>,
    pub iter_time: Duration,
}

/// Training state for one seed: network, optimizer, LR schedule and the
/// current decay assignment.
pub(crate) struct Trainer<'a> {
    cfg: &'a RunConfig,
    net: Network,
    opt: OptimizerState,
    lr: LrSchedule,
    assignment: DecayAssignment,
    param_layers: Vec<LayerId>,
    probe_batch: Option<Tensor>,
    monitoring: bool,
    effective: BTreeMap<LayerId, f64>,
    step: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a RunConfig, seed: u64, data: &PreparedData) -> Result<Self> {
        let net = Network::new(cfg.model.layers.clone(), data.train.sample_shape(), seed)?;
        if net.num_classes() != data.train.classes() {
            return Err(config_err(format!(
                "model emits {} logits but the dataset has {} classes",
                net.num_classes(),
                data.train.classes()
            )));
        }
        let monitoring = !net.monitored_layers().is_empty();
        if cfg.scheduler.mode == DecayMode::OuiDecay && !monitoring {
            return Err(config_err("ouidecay mode needs at least one monitored relu"));
        }
        let per_epoch = data.train.len().div_ceil(cfg.batch_size) as u64;
        let total = per_epoch * cfg.epochs as u64;
        let o = &cfg.optimizer;
        let lr = LrSchedule::new(o.base_lr, o.min_lr, o.warmup_steps, total)?;
        let probe_batch = match cfg.probe.source {
            ProbeSource::TrainingBatch => None,
            ProbeSource::FixedBatch => {
                let n = cfg.probe.batch_size.min(data.train.len());
                let (x, _) = data::batches(&data.train, n, seed, u64::MAX)?
                    .next()
                    .ok_or_else(|| config_err("training split is empty"))?;
                Some(x)
            }
        };
        let param_layers = net.param_layers();
        let assignment =
            DecayAssignment::uniform(param_layers.iter().copied(), cfg.scheduler.lambda_base, 0);
        let effective = assignment.lambdas().clone();
        Ok(Self {
            cfg,
            opt: OptimizerState::new(o.kind, o.adam()),
            net,
            lr,
            assignment,
            param_layers,
            probe_batch,
            monitoring,
            effective,
            step: 0,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.lr.total_steps()
    }

    /// Per-layer decay coefficient used by the last update. For AdaDecay this
    /// is `lambda_base` times the layer-mean multiplier.
    pub fn lambdas(&self) -> &BTreeMap<LayerId, f64> {
        &self.effective
    }

    pub fn train_step(&mut self, x: &Tensor, y: &[usize]) -> Result<StepOutcome> {
        let start = Instant::now();
        let t = self.step + 1;
        let sched = &self.cfg.scheduler;
        let tick = self.monitoring && sched.is_tick(t);
        let capture = tick && self.probe_batch.is_none();

        let trace = nn::forward(&self.net, x, capture)?;
        let mut grads = nn::backward(&self.net, &trace, y)?;
        if !grads.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: t,
                diagnostic: PathBuf::new(),
            });
        }

        let mut report = None;
        let mut tick_time = None;
        if tick {
            let t0 = Instant::now();
            let r = match &self.probe_batch {
                None => oui::report_from_trace(&trace, t)?,
                Some(batch) => oui::probe(&self.net, batch, t)?,
            };
            if sched.mode == DecayMode::OuiDecay {
                self.assignment = decay::assignment_from_report(&r, sched, &self.param_layers)?;
            }
            tick_time = Some(trace.capture_time() + t0.elapsed());
            report = Some(r);
        }
        drop(trace);

        if let Some(max) = self.cfg.optimizer.clip_norm {
            optim::clip_global_norm(&mut grads, max);
        }
        let lr = self.lr.lr_at(t);
        if sched.mode == DecayMode::AdaDecay {
            let weights: BTreeMap<LayerId, Tensor> = grads
                .params
                .iter()
                .map(|(&id, g)| (id, g.weight.clone()))
                .collect();
            let factors = decay::adadecay_factors(&weights, sched.adadecay_alpha)?;
            self.opt.apply_step(
                self.net.params_mut(),
                &grads,
                lr,
                Decay::PerParameter {
                    lambda_base: sched.lambda_base,
                    multipliers: &factors,
                },
            )?;
            for (id, f) in &factors {
                let mean = f.iter().sum::<f64>() / f.len() as f64;
                self.effective.insert(*id, sched.lambda_base * mean);
            }
        } else {
            self.opt
                .apply_step(self.net.params_mut(), &grads, lr, Decay::Layer(&self.assignment))?;
            if tick {
                self.effective = self.assignment.lambdas().clone();
            }
        }
        self.step = t;
        Ok(StepOutcome {
            loss: grads.loss,
            batch: y.len(),
            report,
            tick_time,
            iter_time: start.elapsed(),
        })
    }
}

/// Mean cross-entropy and accuracy in inference mode.
pub fn evaluate(net: &Network, ds: &Dataset) -> Result<(f64, f64)> {
    let n = ds.len();
    let mut loss = 0.0;
    let mut correct = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let x = ds.samples().select(&idx);
        let y = &ds.labels()[start..end];
        let logits = nn::predict(net, &x)?;
        let m = (end - start) as f64;
        loss += nn::loss(&logits, y)? * m;
        correct += nn::accuracy(&logits, y)? * m;
        start = end;
    }
    Ok((loss / n as f64, correct / n as f64))
}

/// Loads the data and trains one seed, writing all run files into `out`.
pub fn run_experiment(cfg: &RunConfig, seed: u64, out: &Path) -> Result<RunRecord> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    run_prepared(cfg, seed, &data, out)
}

/// As [`run_experiment`] with the data already prepared.
pub fn run_prepared(cfg: &RunConfig, seed: u64, data: &PreparedData, out: &Path) -> Result<RunRecord> {
    fs::create_dir_all(out)?;
    let started = Instant::now();
    let mut trainer = Trainer::new(cfg, seed, data)?;
    let mut flip_rng = ChaCha8Rng::seed_from_u64(seed);
    flip_rng.set_stream(HFLIP_STREAM);

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut oui_trace = Vec::new();
    let mut lambda_trace = Vec::new();
    let mut tick_timings = Vec::new();

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (mut x, y) in data::batches(&data.train, cfg.batch_size, seed, epoch as u64)? {
            if cfg.data.hflip {
                data::random_hflip(&mut x, &mut flip_rng);
            }
            let outcome = match trainer.train_step(&x, &y) {
                Err(Error::NonFiniteLoss { step, .. }) => {
                    let diagnostic = write_failure(out, cfg, seed, step, trainer.lambdas())?;
                    return Err(Error::NonFiniteLoss { step, diagnostic });
                }
                Err(e @ Error::NonFiniteActivation { .. }) => {
                    write_failure(out, cfg, seed, trainer.step() + 1, trainer.lambdas())?;
                    return Err(e);
                }
                other => other?,
            };
            let step = trainer.step();
            loss_sum += outcome.loss * outcome.batch as f64;
            seen += outcome.batch;
            if let Some(r) = &outcome.report {
                oui_trace.extend(r.values().iter().map(|(&layer, &oui)| OuiSample { step, layer, oui }));
            }
            if let Some(tick) = outcome.tick_time {
                tick_timings.push(TickTiming {
                    step,
                    iter_ms: ms(outcome.iter_time),
                    tick_ms: ms(tick),
                });
            }
            lambda_trace.extend(
                trainer
                    .lambdas()
                    .iter()
                    .map(|(&layer, &lambda)| LambdaSample { step, layer, lambda }),
            );
        }
        let (val_loss, val_acc) = evaluate(trainer.network(), &data.val)?;
        if !val_loss.is_finite() {
            let diagnostic = write_failure(out, cfg, seed, trainer.step(), trainer.lambdas())?;
            return Err(Error::NonFiniteLoss {
                step: trainer.step(),
                diagnostic,
            });
        }
        let m = EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / seen as f64,
            val_loss,
            val_acc,
            epoch_time_s: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "{} seed {seed} epoch {}: train {:.4} val {:.4} acc {:.4}",
            cfg.name,
            m.epoch,
            m.train_loss,
            m.val_loss,
            m.val_acc
        );
        epochs.push(m);
    }

    let (_, final_train_acc) = evaluate(trainer.network(), &data.train)?;
    let (best_epoch, best_val_loss) = epochs
        .iter()
        .map(|e| (e.epoch, e.val_loss))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
    let record = RunRecord {
        config: cfg.name.clone(),
        mode: cfg.scheduler.mode,
        lambda_base: cfg.scheduler.lambda_base,
        seed,
        epochs,
        best_val_loss,
        best_epoch,
        final_train_acc,
        steps: trainer.step(),
        total_time_s: started.elapsed().as_secs_f64(),
        tick_timings,
        oui_trace,
        lambda_trace,
    };
    write_record(&record, out)?;
    Ok(record)
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn write_failure(
    out: &Path,
    cfg: &RunConfig,
    seed: u64,
    step: u64,
    lambdas: &BTreeMap<LayerId, f64>,
) -> Result<PathBuf> {
    #[derive(Serialize)]
    struct Failure<'a> {
        config: &'a RunConfig,
        seed: u64,
        step: u64,
        lambdas: &'a BTreeMap<LayerId, f64>,
    }
    let path = out.join("failure.json");
    let body = serde_json::to_string_pretty(&Failure {
        config: cfg,
        seed,
        step,
        lambdas,
    })?;
    fs::write(&path, body)?;
    log::error!("training diverged at step {step}; diagnostic written to {}", path.display());
    Ok(path)
}

fn csv_writer(path: &Path, header: &str) -> Result<BufWriter<fs::File>> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{header}")?;
    Ok(w)
}

/// Writes the run files. Everything except `epoch_times.csv`, `timing.csv`
/// and `record.json` is a pure function of (config, seed).
pub fn write_record(record: &RunRecord, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;

    let mut w = csv_writer(&out.join("metrics.csv"), "epoch,train_loss,val_loss,val_acc")?;
    for e in &record.epochs {
        writeln!(w, "{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.val_acc)?;
    }
    w.flush()?;

    let mut w = csv_writer(&out.join("epoch_times.csv"), "epoch,epoch_time_s")?;
    for e in &record.epochs {
        writeln!(w, "{},{}", e.epoch, e.epoch_time_s)?;
    }
    w.flush()?;

    let mut w = csv_writer(&out.join("oui_trace.csv"), "step,layer_id,oui")?;
    for s in &record.oui_trace {
        writeln!(w, "{},{},{}", s.step, s.layer, s.oui)?;
    }
    w.flush()?;

    let mut w = csv_writer(&out.join("lambda_trace.csv"), "step,layer_id,lambda")?;
    for s in &record.lambda_trace {
        writeln!(w, "{},{},{}", s.step, s.layer, s.lambda)?;
    }
    w.flush()?;

    let mut w = csv_writer(&out.join("timing.csv"), "iter_ms,tick_ms,pct")?;
    for t in &record.tick_timings {
        writeln!(w, "{},{},{}", t.iter_ms, t.tick_ms, t.pct())?;
    }
    w.flush()?;

    fs::write(out.join("record.json"), serde_json::to_string_pretty(record)?)?;
    Ok(())
}

/// Reads a `lambda_trace.csv` back as samples.
pub fn read_lambda_trace(path: &Path) -> Result<Vec<LambdaSample>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = || crate::error::input_err(format!("{}:{}: malformed row", path.display(), i + 1));
        let mut cols = line.split(',');
        let step = cols.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let layer = cols.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let lambda = cols.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        out.push(LambdaSample {
            step,
            layer: LayerId(layer),
            lambda,
        });
    }
    Ok(out)
}
