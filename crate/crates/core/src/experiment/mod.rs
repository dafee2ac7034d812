//! Config-driven experiment runner and its report files.

mod config;
mod report;
mod run;

pub use config::{parse_config, ExperimentConfig, Mode, INVENTED_DEFAULTS};
pub use report::{write_report, ColumnStats, RunReport, RunRow, SolverReport, AGGREGATE_COLUMNS, CSV_HEADER};
pub use run::{embedding_path, ground_truth_stack, run, RunOptions};
