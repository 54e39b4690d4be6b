//! Command-line companion to `sidp-core`: IDX data loading, TOML experiment
//! configs, metrics/checkpoint files, and the experiment drivers behind the
//! `sidp` binary.

pub mod checkpoint;
pub mod config;
pub mod experiments;
pub mod idx;
pub mod metrics;
pub mod report;
