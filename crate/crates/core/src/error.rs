use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the testbed.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("controller fault: {0}")]
    ControllerFault(String),

    #[error("insufficient data: window spans {span}s, need {tau}s")]
    InsufficientData { span: f64, tau: f64 },

    #[error("sample at t={t} is not after the window head t={last}")]
    NonMonotonic { t: f64, last: f64 },

    #[error("simulation diverged at t={t}: state {state:?}")]
    Diverged { t: f64, state: Vec<f64> },

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("protocol error: bad magic {0:#06x}")]
    BadMagic(u16),

    #[error("protocol error: unsupported version {0}")]
    UnsupportedVersion(u8),

    #[error("protocol error: unknown datagram kind {0}")]
    UnknownKind(u8),

    #[error("framing error: {0}")]
    Framing(String),

    #[error("transport error: {0}")]
    Transport(#[from] std::io::Error),

    #[error("transport watchdog: {0}")]
    Watchdog(String),

    #[error("reference time {t} outside run [0, {duration}]")]
    OutOfRange { t: f64, duration: f64 },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Empty(String),
}

impl Error {
    pub fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Diverged { .. } => 3,
            Error::Watchdog(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
