//! Study pipeline for the SPECT simulation and reconstruction library:
//! configuration, file-based stages, caching and manifests.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod stages;

pub use config::StudyConfig;
pub use error::{CliError, Result};
pub use pipeline::{run_pipeline, Manifest};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "SPECT_THREADS";

/// Sizes the global thread pool from `SPECT_THREADS`, if set.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Stage(format!("thread pool: {e}")))?;
    }
    Ok(())
}
