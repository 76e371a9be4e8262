use thiserror::Error;

/// Errors produced anywhere in the inference pipeline.
#[derive(Debug, Error)]
pub enum CcivError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("matrix is ill-conditioned (smallest eigenvalue {min_eigenvalue:e})")]
    IllConditioned { min_eigenvalue: f64 },

    #[error("matrix is rank deficient (condition estimate {condition:e})")]
    RankDeficient { condition: f64 },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("data failed validation: {0}")]
    Validation(String),

    #[error("weak design: {0}")]
    WeakDesign(String),

    #[error("variance estimate not positive: {0}")]
    Variance(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CcivError {
    /// True for failures that come from the numbers rather than from the
    /// shape or content of the input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            CcivError::NumericalFailure(_)
                | CcivError::IllConditioned { .. }
                | CcivError::RankDeficient { .. }
                | CcivError::WeakDesign(_)
                | CcivError::Variance(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, CcivError>;
