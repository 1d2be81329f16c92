//! Library side of the `robex` command-line tool: configuration, exit-code
//! mapping and the pipeline commands.

pub mod commands;
pub mod config;
pub mod error;
