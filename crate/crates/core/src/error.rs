use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or dimensions of the arguments do not agree.
    #[error("contract violation: {0}")]
    Contract(String),
    /// An argument is outside its admissible range or non-finite.
    #[error("invalid input: {0}")]
    Input(String),
    /// A numerical routine failed to converge or produced garbage.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// A simulated path left the admissible region.
    #[error("blow-up: {0}")]
    BlowUp(String),
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
