//! Acceptance suite. Runs each criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any failed.
//!
//! `cargo test -p ouidecay --test acceptance -- --nocapture` is not needed:
//! this target has its own `main` and always prints.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use common::*;
use ouidecay::decay::{adadecay_factors, assign_decay};
use ouidecay::harness::{self, read_lambda_trace, run_experiment, sweep, SweepAxis};
use ouidecay::oui::{layer_oui, ActivationMask, OuiReport};
use ouidecay::{
    AdamConfig, Decay, DecayAssignment, DecayMode, LayerId, LayerParams, OptimizerKind, OptimizerState,
    SchedulerConfig, Tensor,
};
use rand::seq::SliceRandom;
use rand::Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

/// Integer minority counts, then one division.
fn integer_oracle(bits: &[bool], b: usize, d: usize) -> f64 {
    let mut total = 0usize;
    for j in 0..d {
        let s = (0..b).filter(|&i| bits[i * d + j]).count();
        total += s.min(b - s);
    }
    total as f64 / (d * (b / 2)) as f64
}

fn oui_of(b: usize, d: usize, bits: Vec<bool>) -> std::result::Result<f64, String> {
    let m = ActivationMask::from_bits(LayerId(0), b, d, bits).map_err(|e| e.to_string())?;
    layer_oui(&m).map_err(|e| e.to_string())
}

fn criterion_1() -> Outcome {
    let (b, d) = (4, 3);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for code in 0u32..1 << (b * d) {
        let bits: Vec<bool> = (0..b * d).map(|k| code >> k & 1 == 1).collect();
        let got = oui_of(b, d, bits.clone())?;
        let want = integer_oracle(&bits, b, d);
        worst = worst.max((got - want).abs());
        ensure!((got - want).abs() <= 1e-15, "mask {code:#x}: {got} vs {want}");
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 1.0, "took {secs:.3} s");
    Ok(format!("4096 masks, max |diff| {worst:e}, {:.1} ms", secs * 1e3))
}

fn criterion_2() -> Outcome {
    let mut r = rng(2);
    let cases = 10_000;
    let mut balanced_checked = 0;
    for case in 0..cases {
        let b = r.random_range(2..=64usize);
        let d = r.random_range(1..=128usize);
        let bits: Vec<bool> = (0..b * d).map(|_| r.random_bool(0.5)).collect();
        let base = oui_of(b, d, bits.clone())?;
        ensure!((0.0..=1.0).contains(&base), "case {case}: OUI {base} out of range");

        let constant: Vec<bool> = (0..b * d).map(|k| bits[k % d]).collect();
        ensure!(oui_of(b, d, constant)? == 0.0, "case {case}: constant columns not 0");

        if b % 2 == 0 {
            let balanced: Vec<bool> = (0..b * d).map(|k| (k / d) % 2 == usize::from(bits[k % d])).collect();
            ensure!(oui_of(b, d, balanced)? == 1.0, "case {case}: balanced columns not 1");
            balanced_checked += 1;
        }

        let mut rows: Vec<usize> = (0..b).collect();
        rows.shuffle(&mut r);
        let mut cols: Vec<usize> = (0..d).collect();
        cols.shuffle(&mut r);
        let permuted: Vec<bool> = (0..b * d).map(|k| bits[rows[k / d] * d + cols[k % d]]).collect();
        ensure!(oui_of(b, d, permuted)? == base, "case {case}: permutation changed OUI");

        let flip: Vec<bool> = (0..d).map(|_| r.random_bool(0.5)).collect();
        let complemented: Vec<bool> = (0..b * d).map(|k| bits[k] ^ flip[k % d]).collect();
        ensure!(oui_of(b, d, complemented)? == base, "case {case}: complement changed OUI");
    }
    Ok(format!("{cases} masks, {balanced_checked} with even B"))
}

fn random_report(r: &mut impl Rng) -> Vec<f64> {
    let n = r.random_range(1..=12usize);
    let grid = [0.0, 0.25, 0.5, 1.0];
    let tied = r.random_bool(0.05);
    let shared = r.random_range(0.0..=1.0);
    (0..n)
        .map(|_| {
            if tied {
                shared
            } else if r.random_bool(0.25) {
                grid[r.random_range(0..grid.len())]
            } else {
                r.random_range(0.0..=1.0)
            }
        })
        .collect()
}

fn criterion_3() -> Outcome {
    let mut r = rng(3);
    let cases = 10_000;
    let mut degenerate = 0;
    for case in 0..cases {
        let values = random_report(&mut r);
        let lambda = 10f64.powf(r.random_range(-6.0..0.0));
        let cfg = SchedulerConfig::new(DecayMode::OuiDecay, lambda);
        ensure!(
            (cfg.s1, cfg.s2, cfg.t_tilde) == (0.67, 5.0, 500),
            "defaults are {:?}",
            (cfg.s1, cfg.s2, cfg.t_tilde)
        );
        let report = OuiReport::new(
            1,
            values.iter().enumerate().map(|(i, &v)| (LayerId(i), v)).collect(),
        )
        .map_err(|e| e.to_string())?;
        let a = assign_decay(&report, &cfg).map_err(|e| e.to_string())?;
        let (lo, hi) = (report.oui_min().unwrap(), report.oui_max().unwrap());
        let (s1l, s2l) = (cfg.s1 * lambda, cfg.s2 * lambda);
        let lam = |i: usize| a.get(LayerId(i)).unwrap();
        for (i, &v) in values.iter().enumerate() {
            let l = lam(i);
            ensure!(l >= s1l && l <= s2l, "case {case}: {l} outside [{s1l}, {s2l}]");
            for (j, &w) in values.iter().enumerate() {
                ensure!(v > w || l <= lam(j), "case {case}: order broken between {i} and {j}");
            }
            if v == lo {
                ensure!(l == s1l, "case {case}: min layer got {l}, want {s1l}");
            }
            if v == hi && hi > lo {
                let rel = (s2l - l) / s2l;
                let bound = cfg.epsilon / (hi - lo + cfg.epsilon);
                ensure!((0.0..=bound).contains(&rel), "case {case}: max layer rel {rel} > {bound}");
            }
        }
        if hi == lo {
            degenerate += 1;
            ensure!(a.lambdas().values().all(|&l| l == s1l), "case {case}: tied report not uniform");
        }
    }
    Ok(format!("{cases} reports, {degenerate} degenerate"))
}

fn check_hold(trace: &[harness::LambdaSample], t_tilde: u64) -> std::result::Result<usize, String> {
    let mut by_layer: BTreeMap<LayerId, Vec<(u64, f64)>> = BTreeMap::new();
    for s in trace {
        by_layer.entry(s.layer).or_default().push((s.step, s.lambda));
    }
    let mut changes = 0;
    for (layer, points) in &by_layer {
        for w in points.windows(2) {
            ensure!(w[1].0 == w[0].0 + 1, "layer {layer}: gap in trace at step {}", w[1].0);
            if w[1].1.to_bits() != w[0].1.to_bits() {
                ensure!(w[1].0 % t_tilde == 0, "layer {layer}: changed at step {}", w[1].0);
                changes += 1;
            }
        }
    }
    Ok(changes)
}

fn criterion_4() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut summary = Vec::new();
    let mut small = blobs_config("ouidecay", 1e-3, 7, 6);
    small.name = "hold-mlp".into();
    let mut cnn = glyph_cnn_config();
    cnn.epochs = 1;
    for cfg in [small, cnn] {
        let out = dir.path().join(&cfg.name);
        run_experiment(&cfg, 1, &out).map_err(|e| e.to_string())?;
        let trace = read_lambda_trace(&out.join("lambda_trace.csv")).map_err(|e| e.to_string())?;
        let t = cfg.scheduler.t_tilde;
        let changes = check_hold(&trace, t)?;
        ensure!(changes > 0, "{}: lambda never moved", cfg.name);
        summary.push(format!("{} t~={t}: {} rows, {changes} changes", cfg.name, trace.len()));
    }
    Ok(summary.join("; "))
}

fn criterion_5() -> Outcome {
    let mut lines = Vec::new();
    for (name, instances, g) in gradcheck_all(20) {
        ensure!(instances >= 20, "{name}: only {instances} instances");
        ensure!(g.worst_rel <= FD_REL_TOL, "{name}: worst relative error {:e}", g.worst_rel);
        ensure!(
            g.kinked * 20 <= g.checked,
            "{name}: {} of {} coordinates straddle a kink",
            g.kinked,
            g.checked
        );
        lines.push(format!("{name} {:.1e}", g.worst_rel));
    }
    Ok(format!("worst relative error per kind: {}", lines.join(", ")))
}

fn two_layers(w: [f64; 2]) -> BTreeMap<LayerId, LayerParams> {
    [(LayerId(0), w[0]), (LayerId(2), w[1])]
        .into_iter()
        .map(|(id, v)| {
            (
                id,
                LayerParams {
                    weight: Tensor::new(vec![1, 1], vec![v]).unwrap(),
                    bias: Tensor::new(vec![1], vec![0.25]).unwrap(),
                },
            )
        })
        .collect()
}

fn criterion_6() -> Outcome {
    let (lr, steps) = (0.01, 50);
    let lambdas = [0.1, 0.37];
    let w0 = [0.8, -1.3];
    let assignment = DecayAssignment::new(0, [(LayerId(0), lambdas[0]), (LayerId(2), lambdas[1])].into());
    let zero = ouidecay::Gradients {
        params: two_layers([0.0, 0.0])
            .into_iter()
            .map(|(id, mut p)| {
                p.bias.values_mut()[0] = 0.0;
                (id, p)
            })
            .collect(),
        input: Tensor::zeros(vec![1]),
        loss: 0.0,
    };
    let c = AdamConfig::default();
    let mut worst = 0.0f64;
    let mut gap = f64::INFINITY;
    for kind in [OptimizerKind::Adam, OptimizerKind::AdamW] {
        let mut params = two_layers(w0);
        let mut state = OptimizerState::new(kind, c);
        // scalar oracle state per layer: weight, m, v
        let mut oracle: Vec<(f64, f64, f64)> = w0.iter().map(|&w| (w, 0.0, 0.0)).collect();
        for t in 1..=steps {
            let before: Vec<f64> = [LayerId(0), LayerId(2)]
                .iter()
                .map(|id| params[id].weight.values()[0])
                .collect();
            state
                .apply_step(&mut params, &zero, lr, Decay::Layer(&assignment))
                .map_err(|e| e.to_string())?;
            for (k, id) in [LayerId(0), LayerId(2)].iter().enumerate() {
                let (w, m, v) = &mut oracle[k];
                let got = params[id].weight.values()[0];
                match kind {
                    OptimizerKind::AdamW => {
                        *w *= 1.0 - lr * lambdas[k];
                        ensure!(
                            got == before[k] * (1.0 - lr * lambdas[k]),
                            "AdamW step {t} layer {id}: {got} is not an exact shrink of {}",
                            before[k]
                        );
                    }
                    OptimizerKind::Adam => {
                        let g = lambdas[k] * *w;
                        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                        let m_hat = *m / (1.0 - c.beta1.powi(t));
                        let v_hat = *v / (1.0 - c.beta2.powi(t));
                        *w -= lr * m_hat / (v_hat.sqrt() + c.epsilon);
                    }
                }
                worst = worst.max((got - *w).abs());
                ensure!((got - *w).abs() <= 1e-12, "{kind:?} step {t} layer {id}: {got} vs oracle {w}");
                ensure!(
                    params[id].bias.values()[0] == 0.25,
                    "{kind:?} step {t}: bias was decayed"
                );
            }
        }
        if kind == OptimizerKind::Adam {
            gap = (params[&LayerId(0)].weight.values()[0] - w0[0] * (1.0 - lr * lambdas[0]).powi(steps)).abs();
        }
    }
    ensure!(gap > 1e-3, "Adam and AdamW trajectories coincide ({gap:e})");
    Ok(format!("{steps} zero-gradient steps, max |diff| {worst:e}, Adam vs AdamW gap {gap:.3e}"))
}

fn criterion_7() -> Outcome {
    let cfg = glyph_cnn_config();
    ensure!(cfg.seeds == [1, 2, 3], "seeds are {:?}", cfg.seeds);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let axis = SweepAxis::from_name("lambda_pair", &cfg).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let out = sweep(&cfg, &axis, dir.path()).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();

    ensure!(out.records.len() == 18, "{} runs", out.records.len());
    let mut lambdas: Vec<f64> = out.records.iter().map(|r| r.lambda_base).collect();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    ensure!(lambdas.len() == 2 && lambdas[1] == 5.0 * lambdas[0], "lambda_base values {lambdas:?}");
    for r in &out.records {
        for e in &r.epochs {
            ensure!(
                e.train_loss.is_finite() && e.val_loss.is_finite(),
                "{} seed {}: non-finite loss at epoch {}",
                r.mode,
                r.seed,
                e.epoch
            );
        }
        if r.mode == DecayMode::OuiDecay {
            let s = &cfg.scheduler;
            let (lo, hi) = (s.s1 * r.lambda_base, s.s2 * r.lambda_base);
            ensure!(
                r.lambda_trace.iter().all(|x| x.lambda >= lo && x.lambda <= hi),
                "seed {}: lambda left [{lo}, {hi}]",
                r.seed
            );
        }
    }
    let rows = &out.summary.rows;
    ensure!(rows.len() == 6, "{} summary rows", rows.len());
    for row in rows {
        ensure!(row.runs == 3, "{} {}: {} runs", row.mode, row.lambda_base, row.runs);
        ensure!(
            row.mean_best_val_loss.is_finite() && row.std_best_val_loss.is_finite(),
            "{} {}: non-finite summary",
            row.mode,
            row.lambda_base
        );
    }
    let csv = fs::read_to_string(dir.path().join("summary.csv")).map_err(|e| e.to_string())?;
    ensure!(
        csv.starts_with("config,mode,lambda_base,mean_best_val_loss,std_best_val_loss,flagged_best\n")
            && csv.lines().count() == 7,
        "unexpected summary.csv"
    );
    print!("{}", out.summary.render_table());
    Ok(format!("18 runs, 6 summary rows, {:.1} s", secs))
}

fn criterion_8() -> Outcome {
    let cfg = glyph_cnn_config();
    let r = harness::measure_overhead(&cfg, None).map_err(|e| e.to_string())?;
    ensure!(r.pct < 1.0, "tick {:.4} ms is {:.3}% of {:.3} ms", r.tick_ms, r.pct, r.iter_ms);
    Ok(format!(
        "tick {:.4} ms / iteration {:.3} ms = {:.3}% over {} ticks",
        r.tick_ms, r.iter_ms, r.pct, r.ticks
    ))
}

fn criterion_9() -> Outcome {
    let mut r = rng(9);
    let mut worst = 0.0f64;
    for case in 0..2_000 {
        let n = r.random_range(1..64usize);
        let mag = r.random_range(0.0..1e3);
        let uniform: Vec<f64> = (0..n).map(|_| if r.random_bool(0.5) { mag } else { -mag }).collect();
        let varied: Vec<f64> = (0..n.max(2)).map(|_| r.random_range(-100.0..100.0)).collect();
        let g: BTreeMap<LayerId, Tensor> = [
            (LayerId(0), Tensor::new(vec![n], uniform).unwrap()),
            (LayerId(2), Tensor::new(vec![varied.len()], varied).unwrap()),
        ]
        .into();
        let alpha = 10f64.powf(r.random_range(-6.0..2.0));
        let f = adadecay_factors(&g, alpha).map_err(|e| e.to_string())?;
        ensure!(f[&LayerId(0)].iter().all(|&x| x == 1.0), "case {case}: uniform layer not neutral");
        let tiny = adadecay_factors(&g, 1e-10).map_err(|e| e.to_string())?;
        for &x in tiny.values().flatten() {
            worst = worst.max((x - 1.0).abs());
            ensure!((x - 1.0).abs() <= 1e-9, "case {case}: alpha 1e-10 gives {x}");
        }
    }
    Ok(format!("2000 cases, small-alpha max |f - 1| {worst:e}"))
}

fn criterion_10() -> Outcome {
    let mut cfg = glyph_cnn_config();
    cfg.epochs = 1;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    for mode in [DecayMode::Fixed, DecayMode::AdaDecay, DecayMode::OuiDecay] {
        cfg.scheduler.mode = mode;
        let (a, b) = (dir.path().join(format!("{mode}-a")), dir.path().join(format!("{mode}-b")));
        run_experiment(&cfg, 2, &a).map_err(|e| e.to_string())?;
        run_experiment(&cfg, 2, &b).map_err(|e| e.to_string())?;
        for f in ["metrics.csv", "oui_trace.csv", "lambda_trace.csv"] {
            let x = fs::read(a.join(f)).map_err(|e| e.to_string())?;
            let y = fs::read(b.join(f)).map_err(|e| e.to_string())?;
            ensure!(x.lines_count() > 1, "{mode}: {f} has no data rows");
            ensure!(x == y, "{mode}: {f} differs");
        }
        lines.push(mode.to_string());
    }
    Ok(format!("metrics, oui and lambda traces identical for {}", lines.join(", ")))
}

trait LinesCount {
    fn lines_count(&self) -> usize;
}

impl LinesCount for Vec<u8> {
    fn lines_count(&self) -> usize {
        self.iter().filter(|&&c| c == b'\n').count()
    }
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "OUI oracle equivalence", criterion_1),
        (2, "OUI range and extremes", criterion_2),
        (3, "decay assignment contract", criterion_3),
        (4, "lambda holds between ticks", criterion_4),
        (5, "gradient correctness", criterion_5),
        (6, "coupled vs decoupled decay", criterion_6),
        (7, "desk-scale comparison", criterion_7),
        (8, "tick overhead", criterion_8),
        (9, "AdaDecay neutrality", criterion_9),
        (10, "determinism", criterion_10),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f))
            .unwrap_or_else(|p| Err(format!("panicked: {:?}", p.downcast_ref::<String>().map(String::as_str).or(p.downcast_ref::<&str>().copied()))));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n}: PASS {name} ({detail}) [{secs:.1} s]"),
            Err(why) => {
                failed += 1;
                println!("criterion {n}: FAIL {name} ({why}) [{secs:.1} s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
