use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A caller broke an operation's contract (bad cache, empty index set, ...).
    #[error("contract error: {0}")]
    Contract(String),
    /// Inconsistent configuration. `layer` names the offending layer when known.
    #[error("config error{}: {message}", layer.map(|l| format!(" at layer {l}")).unwrap_or_default())]
    Config { layer: Option<usize>, message: String },
    /// A value outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// A file that is not in the expected format (bad magic, bad tag).
    #[error("format error: {0}")]
    Format(String),
    #[error("version error: file has version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    /// Truncated or internally inconsistent file.
    #[error("corruption error: {0}")]
    Corrupt(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(message: impl Into<String>) -> Self {
        Error::Config {
            layer: None,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
