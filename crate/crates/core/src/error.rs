use thiserror::Error;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("singular input: {0}")]
    Singular(String),

    #[error("{what} did not converge: {detail}")]
    NonConvergence { what: &'static str, detail: String },

    #[error("sampler diagnostics: {0}")]
    Diagnostics(String),

    #[error("grid too small: {0}")]
    Grid(String),

    #[error("basis dimension {dim} exceeds the limit {limit}")]
    DimensionOverflow { dim: usize, limit: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LabError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        LabError::InvalidInput(msg.into())
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::NonConvergence { .. } | LabError::Diagnostics(_) => 3,
            _ => 2,
        }
    }
}
