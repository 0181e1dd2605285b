use std::path::PathBuf;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("input too short: {len} samples, receptive field is {field}")]
    InputTooShort { len: usize, field: usize },

    #[error("degenerate length: {candidates} candidate starts for {num_mask} blocks (valid length {valid_len})")]
    DegenerateLength {
        valid_len: usize,
        candidates: i64,
        num_mask: usize,
    },

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("unsupported wav encoding: {0}")]
    UnsupportedEncoding(String),

    #[error("corrupt wav header: {0}")]
    CorruptHeader(String),

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("corpus has no frame labels")]
    MissingLabels,

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
