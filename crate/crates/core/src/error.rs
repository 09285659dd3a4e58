use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("newick syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },

    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),

    #[error("unknown node: {0}")]
    UnknownNode(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("kernel matrix is ill-conditioned (cholesky failed with jitter up to {max_jitter:e})")]
    IllConditioned { max_jitter: f64 },

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("optimizer did not converge; best point {best:?} with objective {value}")]
    NonConvergence { best: Vec<f64>, value: f64 },

    #[error("{failed} of {total} bags failed")]
    TooManyFailures { failed: usize, total: usize },

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical machinery rather than of the input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::IllConditioned { .. }
                | Error::Degenerate(_)
                | Error::NonConvergence { .. }
                | Error::TooManyFailures { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
