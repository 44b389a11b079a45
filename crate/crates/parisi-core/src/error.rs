//! Error type shared by all core modules.

use alloc::string::String;
use core::fmt;

/// Errors surfaced by the numeric core.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Two operands live in different matrix dimensions.
    DimensionMismatch { expected: usize, got: usize },
    /// A matrix violates the positive-semidefinite tolerance.
    NotPsd { min_eigenvalue: f64 },
    /// A path, p.d.f., or measure fails its structural invariants.
    Invalid(String),
    /// A query left the domain an object is defined on.
    OutOfDomain { value: f64, lo: f64, hi: f64 },
    /// Quadrature mass escaping the spatial grid exceeds the configured bound.
    GridTooSmall { escaped: f64 },
    /// A spatial query fell outside the stored grid extent.
    OutsideGrid { coord: f64, half_extent: f64 },
    /// A query hit a discontinuity of the time marginal where the PDE does not hold.
    AtDiscontinuity { t: f64 },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            CoreError::NotPsd { min_eigenvalue } => {
                write!(f, "matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")
            }
            CoreError::Invalid(msg) => write!(f, "invalid input: {msg}"),
            CoreError::OutOfDomain { value, lo, hi } => {
                write!(f, "query {value} outside domain [{lo}, {hi}]")
            }
            CoreError::GridTooSmall { escaped } => {
                write!(f, "grid extent too small: quadrature mass {escaped:e} escapes the grid")
            }
            CoreError::OutsideGrid { coord, half_extent } => {
                write!(f, "coordinate {coord} outside grid extent {half_extent}")
            }
            CoreError::AtDiscontinuity { t } => {
                write!(f, "t = {t} is a discontinuity point of the time marginal")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
