//! Scenario configuration, presets, the round-by-round driver, and metrics
//! reporting.

mod config;
mod report;
mod scenario;

pub use config::{preset, AggregatorKind, AttackConfig, FedAdamConfig, PretrainConfig, ScenarioConfig, PRESETS};
pub use report::{
    diagonal_mean, off_diagonal_mean, parse_metrics_csv, read_metrics_csv, report, summarize, IsolatedVsGlobal, Report,
    ScenarioSummary,
};
pub use scenario::{
    metrics_header, run_scenario, write_metrics_csv, MetricsRow, ScenarioData, ScenarioResult, Simulation,
    METRICS_FIXED_COLUMNS,
};
