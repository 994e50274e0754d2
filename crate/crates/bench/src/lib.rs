//! Scenario runner and delay benchmarks for a roboiaas federation.
//!
//! [`run_scenario`] boots a federation from a [`ScenarioConfig`] and plays
//! its request script. [`measure_irdd`] and [`measure_tad`] repeat cold runs
//! to time discovery and task assignment on both backends, and
//! [`emit_report`] turns the samples into a CSV file and SVG plots.

pub mod config;
pub mod deploy;
pub mod experiment;
pub mod report;

use thiserror::Error;

pub use config::{BackendConfig, OverlayTopology, ScenarioConfig, ScriptEntry, TransportConfig};
pub use deploy::{boot, new_network, DeploySpec, Deployment};
pub use experiment::{
    measure_irdd, measure_tad, run_fire_suppression, run_scenario, FireFleet, FireOptions, FireReport,
    Measurement, RunReport, SweepOptions,
};
pub use report::{emit_report, read_csv, render_svg, stats, summarize, Metric, MetricSample, Stats, CSV_HEADER};
pub use roboiaas::exec::Execution;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("boot failed: {0}")]
    Boot(String),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("{0}: {1}")]
    Csv(String, #[source] csv::Error),
}
