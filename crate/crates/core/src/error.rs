use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {classes} classes (sample {index})")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },

    #[error("{path}: truncated CIFAR-10 batch, {trailing} trailing bytes at offset {offset}")]
    CifarTruncated {
        path: PathBuf,
        offset: usize,
        trailing: usize,
    },

    #[error("{path}: record {record} has label byte {label} (expected 0..=9)")]
    CifarLabel {
        path: PathBuf,
        record: usize,
        label: u8,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("class {class} has no samples")]
    EmptyClass { class: usize },

    #[error("training diverged at epoch {epoch}, batch {batch} (loss {loss})")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error("non-finite objective at iteration {iteration}")]
    NonFiniteObjective { iteration: usize },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("line {line}: {message}")]
    Csv { line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
