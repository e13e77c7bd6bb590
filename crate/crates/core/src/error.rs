use std::path::PathBuf;

/// Errors raised anywhere in the refinement, retargeting and codebook pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
    #[error("invalid {field}: {message}")]
    Invalid { field: String, message: String },
    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("joint graph contains a cycle through link `{0}`")]
    Cycle(String),
    #[error("kinematic chain is not a tree: {0}")]
    NotATree(String),
    #[error("unknown link `{0}`")]
    UnknownLink(String),
    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("insufficient points: need at least {needed}, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("normal equations are singular or not positive definite")]
    Singular,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("frame {frame} failed: {source}")]
    FrameFailed {
        frame: usize,
        #[source]
        source: Box<Error>,
        partial: Box<crate::refiner::RefinementTrace>,
    },
    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        history: Vec<crate::codebook::EpochRecord>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Singular | Error::NonFinite(_) | Error::Diverged { .. } => true,
            Error::FrameFailed { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
