//! Command-line front end: checkpoints, run configuration, output writers
//! and the subcommands built on `glab-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod output;
