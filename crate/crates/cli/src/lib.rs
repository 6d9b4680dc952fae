//! The `ranger` command-line tool as a library, so tests can drive every
//! subcommand and acceptance criterion in-process.

pub mod ablation;
pub mod commands;
pub mod manifest;
pub mod pipeline;
pub mod selftest;

pub use commands::{run, Cli, Command};
