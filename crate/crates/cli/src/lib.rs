//! Command-line driver: run directories, configuration layering and the
//! desk-scale ablation harness.

pub mod ablation;
pub mod app;
pub mod rundir;

pub use app::{exit_code, resolve_config, run};
