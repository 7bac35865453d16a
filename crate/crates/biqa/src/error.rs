use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {msg}", path.display())]
    Data { path: PathBuf, msg: String },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Core(#[from] biqa_core::Error),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn data(path: &Path, msg: impl std::fmt::Display) -> Self {
        Error::Data {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        }
    }

    /// Attaches a file to a core error raised while decoding it.
    pub fn in_file(path: &Path, e: biqa_core::Error) -> Self {
        match e {
            biqa_core::Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => Error::data(path, other),
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        use biqa_core::Error as C;
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::Data { .. } => 3,
            Error::Numeric(_) => 4,
            Error::Core(e) => match e {
                C::Config(_) => 2,
                C::Diverged(_) | C::NonFinite { .. } => 4,
                _ => 3,
            },
        }
    }
}
