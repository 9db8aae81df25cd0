use thiserror::Error;

/// Errors produced by every layer of the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A state coordinate is outside its unit's cardinality.
    #[error("coordinate {coord}: value {value} out of range for cardinality {card}")]
    InvalidCoordinate { coord: usize, value: u32, card: u32 },

    /// Two operands live on different state spaces.
    #[error("state space mismatch: {left} vs {right}")]
    SpaceMismatch { left: String, right: String },

    /// Structurally malformed input (overlapping coordinate sets, empty sweeps, ...).
    #[error("schema: {0}")]
    Schema(String),

    /// A mathematical precondition does not hold for the given values.
    #[error("constraint: {0}")]
    Constraint(String),

    /// Not enough hidden capacity for the requested synthesis.
    #[error("capacity: {0}")]
    Capacity(String),

    /// Dense enumeration would exceed the configured cap.
    #[error("resource cap exceeded: {0}")]
    Resource(String),

    /// Invalid numeric argument (non-positive concentration, empty sample list, ...).
    #[error("domain: {0}")]
    Domain(String),

    #[error("i/o at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
