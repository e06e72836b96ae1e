//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by simulation, analytics, and estimator operations.
#[derive(Debug, Error)]
pub enum ArwError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A computation exceeded its array or state-space budget.
    #[error("resource limit exceeded: {0}")]
    ResourceLimit(String),

    /// Toppling budget ran out. Stabilization of a finite volume with
    /// killing terminates a.s., so this signals a scheduler or stream bug
    /// rather than slow convergence.
    #[error("toppling budget exhausted after {topplings} topplings (nontermination suspected)")]
    BudgetExhausted {
        topplings: u64,
        /// Site states at the moment the budget ran out, for post-mortems.
        partial: Box<crate::engine::PartialState>,
    },

    /// A scheduler asked to topple a site that is stable for the active mode.
    #[error("illegal toppling: {0}")]
    IllegalToppling(String),

    #[error("site coordinate outside the addressable range: {0}")]
    SiteRange(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// The bisection criterion behaved non-monotonically beyond Monte Carlo
    /// noise; diagnostics carry the offending probe pair.
    #[error("estimator unstable: {0}")]
    EstimatorUnstable(String),

    /// The exact solver found no reachable absorbing state or a singular
    /// system. Impossible for finite volumes with killing; flags a bug.
    #[error("oracle model error: {0}")]
    OracleModel(String),
}

pub type Result<T> = std::result::Result<T, ArwError>;
