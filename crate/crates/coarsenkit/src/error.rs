//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Variants distinguish caller
//! mistakes (domain / parameter / capability) from runtime failures of the
//! numerics (degenerate closure state, rejected steps, misaligned series).

use thiserror::Error;

/// Errors produced by coarsenkit operations.
#[derive(Debug, Error)]
pub enum CoarsenError {
    /// An argument lies outside the mathematical domain of the operation
    /// (e.g. an evaluation point outside `(0, 1]`).
    #[error("domain error: {0}")]
    Domain(String),

    /// A constructor or operation received an invalid parameter value.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// The object cannot provide what was asked of it (e.g. a derivative
    /// order beyond what a user-supplied coefficient pair stores).
    #[error("capability error: {0}")]
    Capability(String),

    /// The evolving state reached a configuration in which the closure or an
    /// observable is no longer well defined (non-positive denominator,
    /// exhausted node set, ...).
    #[error("degenerate state: {0}")]
    Degenerate(String),

    /// A time step was rejected (node ordering violated); the caller should
    /// retry with a smaller step.
    #[error("step rejected: {0}")]
    StepRejected(String),

    /// A structural invariant of a run failed hard enough to abort.
    #[error("invariant violated: {0}")]
    Invariant(String),

    /// Two series could not be aligned on a common time grid.
    #[error("misaligned series: {0}")]
    Misaligned(String),

    /// Configuration file could not be understood.
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CoarsenError>;
