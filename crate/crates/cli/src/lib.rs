//! Command-line front end: configuration, commands and plots.

pub mod commands;
pub mod config;
pub mod plots;
