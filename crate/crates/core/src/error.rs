use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes or image dimensions that violate an operation's contract.
    #[error("dimension error: {0}")]
    Dim(String),

    #[error("invalid argument: {0}")]
    Arg(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("archive error: {0}")]
    Archive(String),

    /// A NaN or infinite loss; training aborts on the first occurrence.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::Image { .. } | Error::Archive(_) => 3,
            Error::Numerical(_) => 4,
            _ => 1,
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dim(format!($($arg)*)) };
}

macro_rules! arg_err {
    ($($arg:tt)*) => { $crate::error::Error::Arg(format!($($arg)*)) };
}

pub(crate) use arg_err;
pub(crate) use dim_err;
