//! Command-line driver: prepare → augment → train → eval / ablate / sweep → predict.
//!
//! Commands share one TOML [`RunConfig`]; flags override individual entries.
//! `ETDPC_SEED` overrides the master seed.

pub mod cli;
pub mod commands;
pub mod config;
pub mod dataset;

pub use cli::{run, Cli, Command};
pub use commands::{exit_code, StageError};
pub use config::{Precision, RunConfig};
