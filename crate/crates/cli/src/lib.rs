//! Library side of the `tsa` command: run directories and subcommand bodies.

pub mod commands;
pub mod manifest;
