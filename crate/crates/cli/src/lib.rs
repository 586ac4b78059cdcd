//! Library side of the `epsmooth` command-line tool: configuration, I/O and
//! mode dispatch. The binary in `main.rs` only parses flags and maps errors to
//! exit codes.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod io;
pub mod run;

pub use config::{Mode, RunConfig};
pub use error::CliError;
pub use run::{execute, run, Artifacts, Overrides};
