//! Metrics, rollouts, drift stress tests, per-pixel maps and MAC counts.

pub mod forecast;
pub mod macs;
pub mod metrics;
pub mod report;
pub mod run;

pub use forecast::{Forecaster, ModelForecaster, Persistence, StepKind};
pub use macs::{count_macs, LayerMacs, MacCount};
pub use metrics::{mae_rmse, ErrorAccumulator, MetricReport};
pub use report::{write_heatmap, write_reports};
pub use run::{drift_eval, evaluate, per_pixel_rmse_map, rollout, shift_append, EvalOptions, EvalOutput, RolloutTrace};
