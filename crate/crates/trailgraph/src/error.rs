use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] trailgraph_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Malformed file contents; `path` is empty for in-memory payloads.
    #[error("{}format error: {message}", prefix(path))]
    Format { path: PathBuf, message: String },
    #[error("remote provider: {0}")]
    Remote(String),
    #[error("{0}")]
    Usage(String),
}

fn prefix(path: &Path) -> String {
    if path.as_os_str().is_empty() {
        String::new()
    } else {
        format!("{}: ", path.display())
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(message: impl Into<String>) -> Self {
        Error::Format {
            path: PathBuf::new(),
            message: message.into(),
        }
    }

    /// Attaches a file path to a format error raised while decoding it.
    pub fn at(self, path: &Path) -> Self {
        match self {
            Error::Format { message, .. } => Error::Format {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        }
    }

    /// Process exit code: 2 for I/O failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Remote(_) => 2,
            _ => 1,
        }
    }
}
