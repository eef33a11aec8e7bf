use thiserror::Error;

/// Errors raised by geometric and tensor-shape preconditions.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): {reason}")]
    InvalidBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        reason: &'static str,
    },
    #[error("non-positive human height {0}")]
    NonPositiveHeight(f64),
    #[error("gamma must be positive, got {0}")]
    NonPositiveGamma(f64),
    #[error("threshold {0} outside (0, 1]")]
    BadThreshold(f64),
    #[error("pose has {found} joints, expected {expected}")]
    JointCount { expected: usize, found: usize },
    #[error("shape mismatch in {what}: expected {expected}, found {found}")]
    Shape {
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error("region ({x1:.3}, {y1:.3}, {x2:.3}, {y2:.3}) lies outside the feature extent")]
    OutsideFeatureExtent { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = DomainError> = std::result::Result<T, E>;
