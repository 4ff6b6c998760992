//! Environment sampling, experiment configuration, plan execution and
//! reporting.

pub mod config;
pub mod plan;
pub mod report;
pub mod sampling;

pub use config::{BoundsConfig, DiffusionConfig, ExperimentConfig};
pub use plan::{run_cell, run_plan, Algorithm, CellSummary, ExperimentPlan, Sweep, SweepParam, SweepPoint};
pub use report::{compare_report, plan_reports, render_table, sweep_csv, CompareReport};
pub use sampling::{Interval, SamplingSpec};
