//! Scenario runner: parses scenario files, runs their tasks against the
//! core library and writes JSON/text/CSV reports.

// Index loops mirror the matrix formulas; `!(x > 0.0)` deliberately rejects NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod run;
pub mod scenario;

pub use run::{report_json, report_text, run_scenario, scan_stats, write_outputs, Report, RunOptions, RunOutput, TaskReport, SCHEMA};
pub use scenario::{Scenario, SchemaError, Task};
