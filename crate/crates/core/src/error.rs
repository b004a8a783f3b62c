use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("direct coupling is singular at trap phase {phi} rad (antinode)")]
    Singularity { phi: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{origin}: line {line}, column {column}: {msg}")]
    ConfigParse {
        origin: String,
        line: usize,
        column: usize,
        msg: String,
    },

    #[error("mechanical frequencies are degenerate (omega_x == omega_y)")]
    DegenerateFrequencies,

    #[error("no cancellation point: Re G does not change sign over [{lo}, {hi}] wavelengths")]
    NoCancellation { lo: f64, hi: f64 },

    #[error("integration diverged at step {step}")]
    Diverged { step: u64 },

    #[error("ill-conditioned fit: {0}")]
    IllConditioned(String),

    #[error("invalid trace data: {0}")]
    Format(String),

    #[error("config hash mismatch: {left} vs {right}")]
    HashMismatch { left: String, right: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ConfigParse { .. } => 2,
            _ => 3,
        }
    }
}
