//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by panel construction, estimation, and inference.
#[derive(Error, Debug)]
pub enum Error {
    #[error("duplicate cell for (unit={unit}, period={period})")]
    DuplicateCell { unit: String, period: String },

    #[error("ragged row: expected {expected} regressors, found {found} at (unit={unit}, period={period})")]
    RaggedRow {
        unit: String,
        period: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {field} at (unit={unit}, period={period})")]
    NonFinite {
        unit: String,
        period: String,
        field: String,
    },

    #[error("empty panel: no observations")]
    EmptyPanel,

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("rank {r} too large for a {n}x{t} matrix")]
    RankTooLarge { r: usize, n: usize, t: usize },

    #[error("eigenvalue solver failed to converge")]
    EigenFailure,

    #[error("singular value decomposition failed")]
    SpectrumFailure,

    #[error("{what} did not converge within {iterations} iterations")]
    NoConvergence { what: String, iterations: usize },

    /// EM imputation hit its iteration cap; the partial result is attached.
    #[error("EM imputation did not converge within {iterations} iterations")]
    EmNoConvergence {
        iterations: usize,
        partial: Box<crate::pca::EmOutcome>,
    },

    /// Outer estimation loop hit its iteration cap; the best iterate is attached.
    #[error("estimator did not converge within {iterations} outer iterations")]
    FitNoConvergence {
        iterations: usize,
        best: Box<crate::estimator::IfeFit>,
    },

    /// Nuclear-norm solver hit its iteration cap; the best iterate is attached.
    #[error("nuclear-norm solver did not converge within {iterations} iterations")]
    NnNoConvergence {
        iterations: usize,
        best: Box<crate::nuclear::NnFit>,
    },

    #[error("regressors are collinear over the observed cells (rcond={rcond:.3e})")]
    Collinear { rcond: f64 },

    #[error("degenerate projector: denominator {value:.3e} underflows")]
    DegenerateProjector { value: f64 },

    #[error("standard error is zero for coefficient {index}")]
    ZeroStdErr { index: usize },

    #[error("long-run denominator 1 - sum(gamma) = {value:.3e} is too close to zero")]
    UnitRoot { value: f64 },

    #[error("missing-data pattern infeasible: {reason}")]
    PatternInfeasible { reason: String },

    #[error("simulation failure rate {failed}/{total} exceeds 1%")]
    TooManyFailures { failed: usize, total: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
