//! Command-line harness around `rlv-core`: config layering, run artifacts,
//! evaluation tables and generation backends.

pub mod backend;
pub mod cli;
pub mod config;
pub mod error;
pub mod logs;
pub mod params;

pub use cli::run;
pub use error::{HarnessError, Result};
