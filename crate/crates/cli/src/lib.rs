//! Experiment drivers and file output for the `flowtopo` command.

pub mod config;
pub mod experiments;
pub mod output;
