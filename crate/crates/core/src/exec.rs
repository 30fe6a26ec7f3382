//! Single-threaded reference mode and a deterministic parallel mode.
//!
//! Work items are independent and results come back in input order, so
//! callers that reduce them sequentially get bitwise the same answer in both
//! modes.

use rayon::prelude::*;

use crate::error::{invalid, Result};

pub const THREADS_ENV: &str = "TAVCE_THREADS";

pub struct Executor {
    pool: Option<rayon::ThreadPool>,
}

impl Executor {
    pub fn serial() -> Self {
        Self { pool: None }
    }

    pub fn with_threads(threads: usize) -> Result<Self> {
        if threads == 0 {
            return Err(invalid("thread count", "must be at least 1"));
        }
        if threads == 1 {
            return Ok(Self::serial());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| invalid("thread pool", e.to_string()))?;
        Ok(Self { pool: Some(pool) })
    }

    /// Reads `TAVCE_THREADS`; unset means single-threaded.
    pub fn from_env() -> Result<Self> {
        match std::env::var(THREADS_ENV) {
            Err(_) => Ok(Self::serial()),
            Ok(v) => {
                let n = v
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| invalid("TAVCE_THREADS", format!("{v:?} is not a positive integer")))?;
                Self::with_threads(n)
            }
        }
    }

    pub fn threads(&self) -> usize {
        self.pool.as_ref().map_or(1, |p| p.current_num_threads())
    }

    /// `items.map(f)`, order preserved.
    pub fn map<I, R, F>(&self, items: &[I], f: F) -> Vec<R>
    where
        I: Sync,
        R: Send,
        F: Fn(&I) -> R + Sync + Send,
    {
        match &self.pool {
            None => items.iter().map(f).collect(),
            Some(pool) => pool.install(|| items.par_iter().map(f).collect()),
        }
    }
}

impl Default for Executor {
    fn default() -> Self {
        Self::serial()
    }
}
