use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid action id {0}")]
    InvalidAction(usize),

    #[error("infeasible budget: {0}")]
    InfeasibleBudget(String),

    #[error("invalid expansion: {0}")]
    Expansion(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{file}: parse error at byte {offset}: {msg}")]
    Parse {
        file: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("{file}: validation error: {msg}")]
    Validation { file: PathBuf, msg: String },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("misaligned step grids in: {}", .0.join(", "))]
    MisalignedLogs(Vec<String>),

    #[error("length mismatch: {0}")]
    Length(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
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
}
