//! Stages, configuration, manifests and the annotation API behind the
//! `geovid` binary.

pub mod config;
pub mod error;
pub mod layout;
pub mod manifest;
pub mod server;
pub mod stages;

/// Caps the worker pool at `GEOVID_THREADS` when set.
pub fn init_threads() -> error::Result<()> {
    if let Ok(v) = std::env::var("GEOVID_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| error::CliError::Config(format!("GEOVID_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| error::CliError::Config(e.to_string()))?;
    }
    Ok(())
}
