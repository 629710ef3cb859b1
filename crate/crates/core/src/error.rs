use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("pose error: {0}")]
    Pose(String),

    #[error("ray error: {0}")]
    Ray(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("gradient check failed at input {input}, coordinate {coordinate}: {detail}")]
    CheckFailure { input: usize, coordinate: usize, detail: String },

    #[error("format error in {path} at byte {offset}: {detail}")]
    Format { path: PathBuf, offset: u64, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
