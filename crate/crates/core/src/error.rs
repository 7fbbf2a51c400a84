use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("{op}: batch of {rows} row(s) is too small for batch statistics")]
    DegenerateBatch { op: &'static str, rows: usize },

    #[error("{op}: row {row} has zero norm")]
    DegenerateVector { op: &'static str, row: usize },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("training diverged: non-finite {component} loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        component: &'static str,
        epoch: usize,
        batch: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("size mismatch in {}: expected {expected} bytes, found {actual}", path.display())]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("non-finite value in {} at row {row}", path.display())]
    NonFiniteRow { path: PathBuf, row: usize },

    #[error("unsupported format version {found:?} (expected {expected:?})")]
    Version { found: String, expected: String },

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }
}
