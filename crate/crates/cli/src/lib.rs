//! Command-line driver: configuration parsing, subcommand orchestration and
//! artifact output for the `mfg-lab` solvers.

pub mod config;
pub mod run;

pub use config::{parse_config, parse_config_str, ConfigErrors, RunConfig};
pub use run::{run_from_path, run_subcommand, Outcome, Overrides, RunError, Subcommand};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod book_cli {}
