use std::fmt;

/// Crate-wide error type. Variants map onto the CLI exit codes:
/// `Config`/`Usage` -> 1, `Data`/`Io` -> 2, `Numeric` -> 3.
#[derive(Debug)]
pub enum Error {
    /// Invalid configuration or command-line usage.
    Config(String),
    /// Bad or missing input data (files, datasets, checkpoints).
    Data(String),
    /// Numeric failure: NaN/Inf loss, failed gradient check.
    Numeric(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl Error {
    /// Process exit code for the CLI: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Data(_) | Error::Io(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
