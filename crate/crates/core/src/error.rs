//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain an operation is defined on.
    #[error("domain error: {0}")]
    Domain(String),
    /// A numeric argument is outside its admissible range.
    #[error("range error: {0}")]
    Range(String),
    /// A grid is larger than the dense-solve limit of an exact routine.
    #[error("size {n} exceeds the dense-solve limit {max}")]
    SizeLimit { n: u32, max: u32 },
    /// Coupling construction failed: the auxiliary variance would be negative.
    #[error("kappa too small: negative coupling variance at vertex ({x},{y}): {detail}")]
    KappaTooSmall { x: i64, y: i64, detail: String },
    /// A constructed object violates one of its defining guarantees.
    #[error("construction invalid: {guarantee}")]
    ConstructionInvalid { guarantee: String },
    /// A comparison hypothesis does not hold on the supplied index set.
    #[error("hypothesis violated: {0}")]
    HypothesisViolation(String),
    /// Not enough data to carry out a fit or an estimate.
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    /// The requested method is not available for the given configuration.
    #[error("method unsupported: {0}")]
    MethodUnsupported(String),
    /// A first-moment estimate vanished, so dependent ratios are undefined.
    #[error("first moment estimate is zero; ratio bounds undefined")]
    ZeroFirstMoment,
    /// Unexpected internal failure (singular system, cache corruption, ...).
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn range(msg: impl Into<String>) -> Self {
        Error::Range(msg.into())
    }
}
