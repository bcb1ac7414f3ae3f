use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("degenerate heading: (sin, cos) = (0, 0)")]
    DegenerateHeading,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("gradient check failed in block(s) {0}")]
    GradientMismatch(String),

    #[error("assignment error: {0}")]
    Assignment(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("no scenes in dataset {0}")]
    NoScenes(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    /// Errors that stem from numerics (as opposed to bad input) map to a
    /// distinct process exit code in the CLI.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::GradientMismatch(_))
    }

    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Argument(_) | Error::Json(_) | Error::NoScenes(_))
    }
}
