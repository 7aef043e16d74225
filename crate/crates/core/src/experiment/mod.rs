//! Experiment orchestration: configuration, run directory, stages, the full
//! pipeline, reports and figures.

pub mod config;
pub mod figures;
pub mod layout;
pub mod pipeline;
pub mod report;
pub mod stages;

pub use config::{ExperimentConfig, Mode};
pub use layout::RunLayout;
pub use pipeline::run_experiment;
pub use report::{Report, ReportRow, RowRole};
