use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ouidecay::harness::{self, RunConfig, SweepAxis};
use ouidecay::Result;

/// Relative output paths are resolved under this directory when it is set.
const OUT_ROOT_ENV: &str = "OUIDECAY_OUT_ROOT";

#[derive(Parser)]
#[command(name = "ouidecay", version, about = "Train and compare weight-decay schedulers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one seed of a config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Defaults to `<output_dir>/<name>/seed_<n>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every point of an ablation axis for every seed of a config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// One of t_tilde, scaling, lambda_pair.
        #[arg(long)]
        axis: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate every record.json under a directory.
    Summarize {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Time the OUI tick against the full training iteration.
    Overhead {
        #[arg(long)]
        config: PathBuf,
        /// Stop after this many steps.
        #[arg(long)]
        max_steps: Option<u64>,
        /// Write timing.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve(out: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if out.is_relative() => Path::new(&root).join(out),
        _ => out.to_path_buf(),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let cfg = RunConfig::from_path(&config)?;
            let out = out.unwrap_or_else(|| {
                cfg.output_dir
                    .clone()
                    .unwrap_or_else(|| "runs".into())
                    .join(&cfg.name)
                    .join(format!("seed_{seed}"))
            });
            let out = resolve(&out);
            let rec = harness::run_experiment(&cfg, seed, &out)?;
            println!(
                "{} [{} lambda_base={}] seed {}: best val loss {:.4} at epoch {}, train acc {:.4}",
                rec.config,
                rec.mode,
                rec.lambda_base,
                rec.seed,
                rec.best_val_loss,
                rec.best_epoch,
                rec.final_train_acc
            );
            println!("wrote {}", out.display());
        }
        Command::Sweep { config, axis, out } => {
            let cfg = RunConfig::from_path(&config)?;
            let axis = SweepAxis::from_name(&axis, &cfg)?;
            let out = resolve(&out);
            let outcome = harness::sweep(&cfg, &axis, &out)?;
            print!("{}", outcome.summary.render_table());
            for p in &outcome.points {
                println!(
                    "{}: {:.4} ± {:.4} ({:.1} s)",
                    p.label, p.mean_best_val_loss, p.std_best_val_loss, p.total_runtime_s
                );
            }
        }
        Command::Summarize { input } => {
            let input = resolve(&input);
            let records = harness::load_records(&input)?;
            let summary = harness::summarize(&records)?;
            summary.write_csv(&input.join("summary.csv"))?;
            print!("{}", summary.render_table());
        }
        Command::Overhead {
            config,
            max_steps,
            out,
        } => {
            let cfg = RunConfig::from_path(&config)?;
            let report = harness::measure_overhead(&cfg, max_steps)?;
            println!(
                "iteration {:.3} ms, tick {:.4} ms, {:.4}% over {} ticks in {} steps",
                report.iter_ms, report.tick_ms, report.pct, report.ticks, report.steps
            );
            if let Some(out) = out {
                report.write_csv(&resolve(&out))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
