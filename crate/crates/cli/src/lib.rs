//! Scenario configuration, execution, reporting and the verification
//! suite for `parafreq`.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod report;
pub mod runner;
pub mod suite;

pub use config::{parse_config, ConfigError, Scenario, ScenarioConfig};
pub use report::{emit_report, Format, Report};
pub use runner::{run_scenario, RunError};
