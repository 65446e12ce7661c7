use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("label {label} at index {index} is outside [0, {classes})")]
    Label {
        index: usize,
        label: usize,
        classes: usize,
    },

    #[error("tape error: {0}")]
    Tape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid configuration `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("malformed dataset or checkpoint field `{field}`: {message}")]
    Format { field: String, message: String },

    #[error("subset performance table is missing subset {0:?}")]
    MissingSubset(Vec<usize>),

    #[error("degenerate contributions: shapley values sum to {0}, cannot normalize to shares")]
    DegenerateContribution(f64),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("sample {0} has no present modality")]
    EmptyChain(usize),

    #[error("training aborted at epoch {epoch}, batch {batch}: {message}")]
    Aborted {
        epoch: usize,
        batch: usize,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that originate in floating point arithmetic rather
    /// than in user input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::Aborted { .. })
    }
}
