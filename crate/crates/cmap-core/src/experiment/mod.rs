//! The experiment layer: configuration, run directories, and the
//! subcommands behind the `cmap-lab` binary.
//!
//! Library code in the sibling modules stays reusable and silent; this
//! layer owns JSON configs, CSV artifacts, stdout, and exit codes. Runs are
//! reproducible by construction — artifact bytes depend only on the
//! resolved config, which includes the master seed, never on timing or
//! worker count.

pub mod ablate;
pub mod cli;
pub mod config;
pub mod eval;
pub mod observe;
pub mod runner;
pub mod setup;
pub mod verify;

pub use cli::{cli_dispatch, exit_code_for};
pub use config::{load_config, RunConfig};
pub use runner::{RunContext, RUNS_DIR_ENV};
