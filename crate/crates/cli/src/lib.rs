//! Experiment driver: configuration, output handling and subcommands.

pub mod commands;
pub mod config;
pub mod output;
