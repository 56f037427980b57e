use thiserror::Error;

/// Errors surfaced by the library. Variants are grouped by how the CLI maps
/// them to exit codes: usage/config -> 1, data/format -> 2, numeric -> 3.
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dim(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("all attention positions masked for row {0}")]
    AllMasked(usize),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code class for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dim(_) | Error::Usage(_) | Error::Config(_) => 1,
            Error::Data(_) | Error::Format(_) | Error::Io { .. } | Error::Generation(_) => 2,
            Error::Numeric(_) | Error::AllMasked(_) => 3,
        }
    }
}
