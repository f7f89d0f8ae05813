//! Crate-wide error type with the process exit codes the CLI maps it to.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, CLI arguments, or input data.
    #[error("config error: {0}")]
    Config(String),
    /// Numerical failure that the damping/skip policies could not absorb.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// Distributed-protocol violation: framing, version, pass desync, lost peer.
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Exit code contract: 0 success, 2 config error, 3 numerical failure,
    /// 4 protocol error. Io/serde failures count as config-level problems
    /// unless a subsystem wraps them into a more specific variant.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io(_) | Error::Json(_) | Error::Csv(_) => 2,
            Error::Numerical(_) => 3,
            Error::Protocol(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
