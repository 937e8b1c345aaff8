use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the simulation, flow and diagnostics layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("sampler failed: {0}")]
    Sampler(String),

    /// The vector handed to `S(-t)` is not numerically inside `S(t)E`.
    #[error("range error: mode {mode} needs amplification {amplification:.3e} above cap {cap:.3e}")]
    Range {
        mode: usize,
        amplification: f64,
        cap: f64,
    },

    #[error("refinement did not converge after depth {depth}: last levels differ by {last:.3e} (previous {previous:.3e})")]
    Convergence {
        depth: usize,
        last: f64,
        previous: f64,
    },

    #[error("non-finite state at step {step}")]
    Divergence { step: usize },

    #[error("infeasible exponents: {0}")]
    Infeasible(String),

    #[error("resource limit: {0}")]
    Resource(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("monte carlo run failed: {failed} of {total} samples failed")]
    RunFailed { failed: usize, total: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
