//! Experiment plumbing: config parsing, tuned-rate presets, metrics and
//! sweep CSV emission, the built-in verification suite, and the CLI.
//!
//! The config format and CSV schemas are documented in [`config`] and
//! [`metrics`]/[`mod@sweep`]; [`verify`] holds the invariant suite behind
//! `defedavg verify`.

pub mod cli;
pub mod config;
pub mod metrics;
pub mod presets;
pub mod sweep;
pub mod verify;

pub use config::{parse_config, ConfigFile, Experiment, Target, DATA_DIR_ENV};
pub use metrics::{fmt_f64, metrics_to_string, write_metrics_csv, METRICS_HEADER};
pub use presets::{lookup as preset_lookup, Preset, PRESETS};
pub use sweep::{sweep, sweep_to_string, SweepCell, SweepTable, SWEEP_HEADER};
pub use verify::{run_verification_suite, CheckResult};
