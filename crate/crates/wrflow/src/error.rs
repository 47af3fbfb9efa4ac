//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by validation, tree traversal, sampling, and I/O.
#[derive(Debug, Error)]
pub enum WrError {
    /// A matrix expected to be Hermitian failed the symmetry check.
    #[error("matrix is not Hermitian: asymmetry {defect:.3e} exceeds tolerance {tol:.3e} (relative to Frobenius norm)")]
    NotHermitian { defect: f64, tol: f64 },

    /// A matrix expected to be positive semidefinite had an eigenvalue below
    /// the negative tolerance band.
    #[error("matrix is not positive semidefinite: eigenvalue {eigenvalue:.6e} is below -{tol:.3e} * operator norm")]
    NotPsd { eigenvalue: f64, tol: f64 },

    /// A matrix expected to be an orthogonal projection failed idempotency
    /// or self-adjointness.
    #[error("matrix is not an orthogonal projection: defect {defect:.3e} exceeds tolerance {tol:.3e}")]
    NotProjection { defect: f64, tol: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A word letter fell outside the alphabet `1..=m` of the projection family.
    #[error("letter {letter} is outside the alphabet 1..={m}")]
    InvalidLetter { letter: u8, m: usize },

    /// The operation needs a nonempty word (e.g. a dissipated term has no
    /// meaning at the root).
    #[error("operation requires a nonempty word")]
    EmptyWord,

    /// An exhaustive traversal would exceed the configured node budget.
    #[error("node budget exceeded: {requested} nodes requested, budget is {budget}")]
    BudgetExceeded { requested: u128, budget: u64 },

    /// The energy support of the root operator is zero-dimensional where a
    /// nonempty basis is required.
    #[error("energy support basis is empty (zero root operator)")]
    EmptyBasis,

    /// The residual branch measure is only defined for binary families.
    #[error("residual branch measure requires exactly 2 projections, family has {m}")]
    ResidualKindNotBinary { m: usize },

    /// The residual branch measure requires the projections to sum to the
    /// identity on the energy support.
    #[error("residual branch measure requires the splitting condition on the energy support")]
    ResidualKindNotSplitting,

    /// A statistic was requested over an empty collection of samples.
    #[error("empty sample set")]
    EmptySampleSet,

    /// Frame extraction from a recorded branch needs the per-step dissipated
    /// operators, which were not retained during sampling.
    #[error("branch did not retain its dissipated operators; sample with retain_ops enabled")]
    OperatorsNotRetained,

    /// Frame verification against the full root operator needs a branch whose
    /// residual has numerically died out.
    #[error("branch is not numerically extinct: residual trace {residual:.3e} is above threshold {threshold:.3e}")]
    BranchNotExtinct { residual: f64, threshold: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, WrError>;
