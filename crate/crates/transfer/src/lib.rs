//! File formats, dataset IO and the command-line front end around
//! `transfer-core`.

pub mod checkpoint;
pub mod cli;
pub mod dataset_io;
pub mod error;
pub mod heatmaps;
pub mod parallel;
pub mod pnm;
pub mod reports;
pub mod sweep;
pub mod tft;

pub use error::{CliError, Result};
