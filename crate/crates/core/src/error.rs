//! Error type shared across the crate.

use alloc::string::String;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;

/// Things that can go wrong while building tapes, training, or accounting.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor construction or tape op got shapes that do not fit together.
    ShapeMismatch { context: String },
    /// A numeric argument is outside its valid domain (negative norm bound,
    /// alpha < 2, delta outside (0, 1), ...).
    InvalidArgument { context: String },
    /// Calibration could not reach the requested target within its search range.
    CalibrationFailed { context: String },
    /// A public batch overlaps the private training set.
    PublicDataOverlap { context: String },
    /// Dataset contents are inconsistent (label out of range, count mismatch).
    InvalidData { context: String },
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>) -> Self {
        Error::ShapeMismatch { context: context.into() }
    }

    pub(crate) fn arg(context: impl Into<String>) -> Self {
        Error::InvalidArgument { context: context.into() }
    }

    pub(crate) fn data(context: impl Into<String>) -> Self {
        Error::InvalidData { context: context.into() }
    }
}

impl core::fmt::Display for Error {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Error::ShapeMismatch { context } => write!(f, "shape mismatch: {context}"),
            Error::InvalidArgument { context } => write!(f, "invalid argument: {context}"),
            Error::CalibrationFailed { context } => write!(f, "calibration failed: {context}"),
            Error::PublicDataOverlap { context } => write!(f, "public data overlap: {context}"),
            Error::InvalidData { context } => write!(f, "invalid data: {context}"),
        }
    }
}

impl core::error::Error for Error {}
