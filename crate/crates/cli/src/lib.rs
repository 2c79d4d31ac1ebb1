//! Scene files and subcommands behind the `raylines` binary.

pub mod commands;
pub mod scene;
