use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("date {0} falls outside all defined seasons")]
    OutOfSeason(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("degenerate smoothing window at position {position}: {distinct} distinct neighbor positions")]
    DegenerateWindow { position: f64, distinct: usize },
    #[error("bandwidth selection failed: {0}")]
    BandwidthSelection(String),
    #[error("QP infeasible: {0}")]
    QpInfeasible(String),
    #[error("QP unbounded or not positive definite: {0}")]
    QpUnbounded(String),
    #[error("objective evaluation failed: {0}")]
    Evaluation(String),
    #[error("identifiability error: {0}")]
    Identifiability(String),
    #[error("insufficient excitation: {0}")]
    InsufficientExcitation(String),
    #[error("model assembly error: {0}")]
    Assembly(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("simulation diverged at step {step}")]
    Divergence { step: usize },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Shape(_)
            | Error::OutOfSeason(_)
            | Error::InsufficientData(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_) => 2,
            _ => 1,
        }
    }
}
