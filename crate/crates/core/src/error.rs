//! Error type shared by every module in the crate.

use alloc::string::String;
use core::fmt;

/// Crate-wide error. Variants map onto the failure classes the artifact
/// promises to surface: shape/dimension violations, non-finite numerics
/// (fail-fast, naming the producing op), contract misuse, configuration
/// problems, format/corruption problems, and training divergence.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Incompatible tensor shapes for an operation.
    Dimension { op: &'static str, detail: String },
    /// An op produced NaN or Inf; the producing op is named.
    NonFinite { op: String },
    /// An API precondition was violated by the caller.
    Contract { what: String },
    /// A configuration value is invalid.
    Config { what: String },
    /// Encoded data is malformed (bad magic, truncation, checksum).
    Format { what: String },
    /// A persisted artifact has an incompatible version or stage tag.
    Version { what: String },
    /// A loss became non-finite during training; carries the step index.
    Diverged { step: usize },
    /// Internal invariant broken; a bug, not a user error.
    Internal { what: String },
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, detail } => write!(f, "dimension error in `{op}`: {detail}"),
            Error::NonFinite { op } => write!(f, "non-finite value produced by `{op}`"),
            Error::Contract { what } => write!(f, "contract violation: {what}"),
            Error::Config { what } => write!(f, "invalid configuration: {what}"),
            Error::Format { what } => write!(f, "format error: {what}"),
            Error::Version { what } => write!(f, "version error: {what}"),
            Error::Diverged { step } => write!(f, "training diverged at step {step}"),
            Error::Internal { what } => write!(f, "internal error: {what}"),
        }
    }
}

impl core::error::Error for Error {}

impl Error {
    pub fn contract(what: impl Into<String>) -> Self {
        Error::Contract { what: what.into() }
    }

    pub fn config(what: impl Into<String>) -> Self {
        Error::Config { what: what.into() }
    }

    pub fn format(what: impl Into<String>) -> Self {
        Error::Format { what: what.into() }
    }

    pub fn internal(what: impl Into<String>) -> Self {
        Error::Internal { what: what.into() }
    }
}
