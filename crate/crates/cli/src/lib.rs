//! Config-driven command-line front end for event-triggered MHE experiments.

pub mod commands;
pub mod config;

pub use commands::CliError;
pub use config::{load, Overrides, RunSpec};

/// Caps rayon's global pool from `ETMHE_THREADS` (unset or empty: no cap).
pub fn configure_threads(value: Option<&str>) -> Result<(), CliError> {
    let Some(v) = value.map(str::trim).filter(|v| !v.is_empty()) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Usage(format!("ETMHE_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size thread pool: {e}")))
}
