//! Command-line orchestration for the lexma pipeline: config loading, stage
//! runners that write versioned checkpoints and CSV/JSON reports, and the
//! `explain` and `score` utilities.

pub mod commands;
pub mod config;
pub mod pipeline;
