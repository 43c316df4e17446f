use thiserror::Error;

pub type Result<T> = std::result::Result<T, QpsError>;

#[derive(Debug, Error)]
pub enum QpsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A measured delay is at or beyond the baseline length, so no point in
    /// space can produce it.
    #[error("delay s{baseline} = {delay} m is not below the baseline length {length} m")]
    DegenerateDelay {
        baseline: usize,
        delay: f64,
        length: f64,
    },

    #[error("singular jacobian (condition number {condition_number:e})")]
    SingularJacobian { condition_number: f64 },

    #[error("solver did not converge after {iterations} iterations (residual {residual_norm:e} m)")]
    NotConverged {
        iterations: usize,
        residual_norm: f64,
    },

    #[error("degenerate geometry (condition number {condition_number:e})")]
    DegenerateGeometry { condition_number: f64 },

    #[error("no coincidence dip found: {0}")]
    NoDipFound(String),

    #[error("dip fit diverged after {iterations} iterations")]
    FitDiverged { iterations: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl QpsError {
    /// Stable machine-readable name of the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            QpsError::InvalidInput(_) => "invalid-input",
            QpsError::DegenerateDelay { .. } => "degenerate-delay",
            QpsError::SingularJacobian { .. } => "singular-jacobian",
            QpsError::NotConverged { .. } => "not-converged",
            QpsError::DegenerateGeometry { .. } => "degenerate-geometry",
            QpsError::NoDipFound(_) => "no-dip-found",
            QpsError::FitDiverged { .. } => "fit-diverged",
            QpsError::Io(_) => "io",
            QpsError::Json(_) => "json",
            QpsError::Csv(_) => "csv",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        QpsError::InvalidInput(msg.into())
    }
}
