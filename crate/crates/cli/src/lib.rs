//! The `panocal` command-line tool: file formats, predictor plumbing and the
//! experiment subcommands.

pub mod commands;
pub mod formats;
pub mod manifest;
pub mod predictors;

pub use commands::{run, Cli};
