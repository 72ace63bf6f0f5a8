//! Crate-wide error type.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor operation received shapes it cannot combine.
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// A numeric result left the finite range. Values are never allowed
    /// to propagate as NaN/Inf; the op that produced them fails instead.
    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),

    /// Backward was requested without a matching cached forward pass.
    #[error("backward called without a cached forward pass in {0}")]
    MissingForwardCache(&'static str),

    /// Invalid run or model configuration.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Topology validation failed; every violation is listed.
    #[error("invalid topology:\n{}", .0.join("\n"))]
    Topology(Vec<String>),

    /// A message referenced an endpoint the bus does not know.
    #[error("unregistered endpoint: {0}")]
    UnknownEndpoint(String),

    /// Wire frame encoding or decoding failed.
    #[error("codec error: {0}")]
    Codec(String),

    /// An envelope violated the payload policy (e.g. raw input data).
    #[error("payload audit violation from {sender}: {detail}")]
    PayloadViolation { sender: String, detail: String },

    /// The training protocol reached an inconsistent state.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Dataset construction or lookup failed.
    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True when the fault lies with user-supplied inputs (config files,
    /// datasets, CLI arguments) rather than an internal invariant.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_) | Error::Topology(_) | Error::Dataset(_) | Error::Io(_)
        )
    }
}
