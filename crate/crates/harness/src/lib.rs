//! Experiment driver: TOML sweep definitions, parallel execution over seeds,
//! CSV result files, aggregation and comparison.

pub mod aggregate;
pub mod config;
pub mod error;
pub mod records;
pub mod runner;
pub mod verify;

pub use aggregate::{best_row, compare_policies, compare_rows, Comparison, Selection};
pub use config::{Cell, ExperimentSpec, PolicyEntry, SweepAxes, RESULT_DIR_VAR};
pub use error::{Error, Result};
pub use records::{AggregateRow, RawRow, RunRow, AGGREGATE_FILE, RAW_FILE, RUNS_FILE, SCHEMA_LINE};
pub use runner::{run_experiment, ExperimentResults};
pub use verify::{verify_dir, VerifyReport};
