//! File formats, dataset directories, heatmap rendering and the
//! `concept-probe` command line on top of [`concept_probe_core`].

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod export;
pub mod format;
pub mod pnm;
pub mod render;

pub use concept_probe_core as core;
pub use error::{Error, Result};

/// Environment variable capping the worker threads.
pub const THREADS_ENV: &str = "CONCEPT_PROBE_THREADS";

/// Size the global thread pool from [`THREADS_ENV`] when it is set.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV}={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size thread pool: {e}")))
}
