//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two factors (or a factor and a registry) disagree on a variable's dimension,
    /// or vector/matrix sizes are inconsistent.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("variable `{0}` is already registered")]
    DuplicateVariable(String),

    #[error("variable `{0}` is not registered")]
    UnknownVariable(String),

    /// The information block of the variables being removed is singular or
    /// ill-conditioned; typically a variable with no prior information is
    /// being rolled up.
    #[error("marginalization is singular: {0}")]
    SingularMarginalization(String),

    /// A canonical form that is not a proper distribution (information matrix
    /// not symmetric positive definite) was asked for moments, or vice versa.
    #[error("not a distribution: {0}")]
    NotADistribution(String),

    /// The joint over a factor graph is not positive definite, so no proper
    /// posterior exists.
    #[error("improper posterior: {0}")]
    ImproperPosterior(String),

    /// Fusion on a link must be skipped this step (e.g. a common variable has
    /// no prior information yet, so the send-side marginalization is singular).
    #[error("fusion deferred on link to `{peer}`: {reason}")]
    FusionDeferred { peer: String, reason: String },

    /// A message violates the link protocol (scope outside the common set,
    /// duplicate delivery, wrong addressee).
    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
