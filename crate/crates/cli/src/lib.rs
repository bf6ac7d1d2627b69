//! Command-line front end: a flat `key = value` configuration, the
//! subcommands and their exit codes.

pub mod commands;
pub mod config;
pub mod exit;
