use thiserror::Error;

/// Errors raised by ingestion, simulation and estimation.
///
/// Variants fall into two families: input validation problems (bad files,
/// out-of-domain values, inconsistent panels) and estimation failures
/// (collinearity, non-convergence, identification). The CLI maps the first
/// family to exit code 2 and the second to exit code 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {message}")]
    Csv { path: String, message: String },
    #[error("missing column `{column}` in {path}")]
    MissingColumn { path: String, column: String },
    #[error("validation failed:\n{}", .0.join("\n"))]
    Validation(Vec<String>),
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("collinear regressors: {0}")]
    Collinear(String),
    #[error("fixed-effect demeaning did not converge after {iterations} sweeps (max change {max_change:e})")]
    NotConverged { iterations: usize, max_change: f64 },
    #[error("under-identified: {0}")]
    Underidentified(String),
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("alpha = -1 makes the reduced-form mapping singular")]
    SingularAlpha,
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(vec![msg.into()])
    }

    /// True for problems with the inputs rather than with estimation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Csv { .. }
                | Error::MissingColumn { .. }
                | Error::Validation(_)
                | Error::InvalidInput(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
