//! Experiment harness: configs, seeded runs, summaries, sweeps and timing.

pub mod config;
pub mod overhead;
pub mod run;
pub mod summary;
pub mod sweep;

pub use config::{DataConfig, DataSource, ModelConfig, OptimizerConfig, ProbeConfig, ProbeSource, RunConfig, SweepConfig};
pub use overhead::{measure_overhead, TimingReport, MIN_TICKS};
pub use run::{evaluate, prepare_data, read_lambda_trace, run_experiment, run_prepared, EpochMetrics, LambdaSample, OuiSample, PreparedData, RunRecord, TickTiming};
pub use summary::{load_records, mean_std, summarize, Summary, SummaryRow, TIE_DECIMALS};
pub use sweep::{sweep, SweepAxis, SweepOutcome, SweepPoint};
