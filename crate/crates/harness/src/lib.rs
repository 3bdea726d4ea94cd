//! Synthetic data, toy codec, metrics, image I/O and the pipelines behind
//! the `midm` command-line tool.

pub mod codec;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod metrics;
pub mod ppm;
pub mod run;
pub mod sweep;
pub mod synthetic;

pub use error::{HarnessError, Result};
