//! Thread-pool setup and batch-parallel evaluation.

use rayon::prelude::*;
use transfer_core::data::Dataset;
use transfer_core::train::{Classifier, Metrics, EVAL_BATCH};

use crate::error::{CliError, Result};

pub const THREADS_VAR: &str = "TRANSFER_THREADS";

/// Parses a `TRANSFER_THREADS` value; `None` leaves the choice to rayon.
pub fn parse_threads(value: Option<&str>) -> Result<Option<usize>> {
    match value.map(str::trim) {
        None | Some("") => Ok(None),
        Some(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!("{THREADS_VAR} must be a positive integer, got {v:?}"))),
        },
    }
}

/// Caps the global pool at `TRANSFER_THREADS` workers. Only the first call
/// in a process has an effect.
pub fn init_pool() -> Result<()> {
    let var = std::env::var(THREADS_VAR).ok();
    if let Some(n) = parse_threads(var.as_deref())? {
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("thread pool already initialised");
        }
    }
    Ok(())
}

/// Same result as the serial evaluator, with batches spread over the pool.
pub fn evaluate<C: Classifier + Sync>(model: &C, data: &Dataset) -> transfer_core::Result<Metrics> {
    let indices: Vec<usize> = (0..data.len()).collect();
    let batches: Vec<Vec<usize>> = indices
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let (images, _) = data.batch(chunk)?;
            model.predict(&images)
        })
        .collect::<transfer_core::Result<_>>()?;
    let labels: Vec<usize> = data.samples.iter().map(|s| s.label).collect();
    Metrics::from_predictions(&batches.concat(), &labels, data.num_classes())
}
