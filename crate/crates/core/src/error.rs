use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("rejected: {0}")]
    Rejected(String),

    #[error("atlas error: {0}")]
    Atlas(String),

    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    Dims {
        expected: [usize; 3],
        found: [usize; 3],
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("singular design matrix: columns {columns:?} are collinear with earlier columns")]
    SingularDesign { columns: Vec<String> },

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("degenerate class counts: {0}")]
    DegenerateClass(String),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("degenerate relevance: {0}")]
    DegenerateRelevance(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
