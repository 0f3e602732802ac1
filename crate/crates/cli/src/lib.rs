//! Command-line front end for the empirical likelihood experiments: a run
//! configuration format and the `run`, `trace` and `plotdata` commands.

pub mod commands;
pub mod config;

pub use commands::{cmd_plotdata, cmd_run, cmd_trace, CliError, PlotKind};
pub use config::{parse_config, parse_config_str, RunConfig};
