//! Experiment plumbing: dataset ingestion, run configuration, and the
//! experiment entry point the CLI drives.

pub mod config;
pub mod experiment;
pub mod idx;
