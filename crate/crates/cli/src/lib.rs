//! Library half of the `lagsim` binary: config parsing, problem assembly,
//! method execution, and artifact emission, kept importable so tests can
//! drive experiments without shelling out.

pub mod config;
pub mod emit;
pub mod experiment;
