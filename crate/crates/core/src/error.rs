use thiserror::Error;

pub type Result<T, E = CbbError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CbbError {
    #[error("shape error: {0}")]
    Shape(String),

    /// Factorization or solve failed; carries what we know about conditioning.
    #[error("numerical error: {reason} (min pivot {min_pivot:e}, diag range [{min_diag:e}, {max_diag:e}])")]
    Numerical {
        reason: String,
        min_pivot: f64,
        min_diag: f64,
        max_diag: f64,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("parameter error: {0}")]
    Param(String),

    #[error("conditioning error: {0}")]
    Conditioning(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Training { epoch: usize, detail: String },

    #[error("check failed: {0}")]
    Check(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> CbbError {
    CbbError::Shape(msg.into())
}
