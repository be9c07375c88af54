//! Worker pool sizing.

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "TQS_THREADS";

/// Parses a `TQS_THREADS` value; `None` or empty means all cores.
pub fn thread_count(value: Option<&str>) -> Result<Option<usize>> {
    match value.map(str::trim) {
        None | Some("") => Ok(None),
        Some(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got '{v}'"))),
        },
    }
}

/// Sizes the global rayon pool from `TQS_THREADS`. Returns the number of
/// workers in use. Later calls keep the first pool.
pub fn init_from_env() -> Result<usize> {
    let env = std::env::var(THREADS_ENV).ok();
    if let Some(n) = thread_count(env.as_deref())? {
        // an already-built pool is fine
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}
