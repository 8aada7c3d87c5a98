use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("trajectory `{id}`: {message}")]
    InvalidTrajectory { id: String, message: String },

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("rank {requested} not available: at most {available} components")]
    Rank { requested: usize, available: usize },

    #[error("{0}")]
    Undefined(String),

    #[error("empty distribution: {0}")]
    Empty(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("normal matrix is singular: {0}")]
    Singular(String),

    #[error("invalid parameters: {0}")]
    Parameter(String),

    #[error("numeric underflow at step {step}: all emission densities vanished")]
    Underflow { step: usize },

    #[error("component {component} collapsed after {reseeds} re-seeds")]
    DegenerateComponent { component: usize, reseeds: usize },

    #[error("regime {regime} starved after {reseeds} re-seeds")]
    Starvation { regime: usize, reseeds: usize },

    #[error("probe diverged: {0}")]
    LearningRate(String),

    #[error("transfer incompatible: {0}")]
    TransferIncompatible(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Coarse classification used to map failures onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Stage { source, .. } => source.class(),
            Error::Config(_) => ErrorClass::Usage,
            Error::Malformed { .. }
            | Error::InvalidTrajectory { .. }
            | Error::DimensionMismatch { .. }
            | Error::Empty(_)
            | Error::TransferIncompatible(_)
            | Error::File { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => ErrorClass::Data,
            Error::Rank { .. }
            | Error::Undefined(_)
            | Error::Domain(_)
            | Error::Singular(_)
            | Error::Parameter(_)
            | Error::Underflow { .. }
            | Error::DegenerateComponent { .. }
            | Error::Starvation { .. }
            | Error::LearningRate(_) => ErrorClass::Numerical,
        }
    }

    /// Wraps the error with the name of the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}
