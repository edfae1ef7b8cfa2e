//! Crate-wide error type.
//!
//! Variants map onto the CLI exit-code contract: configuration and input
//! problems are user errors (exit 2), divergence is exit 3, and I/O or
//! corruption is exit 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up (names both shapes where possible).
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Invalid configuration value (bad kernel size, alpha out of range, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// An API contract was violated (non-scalar loss, fully masked row, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad runtime input (out-of-vocabulary token, head index out of range).
    #[error("input error: {0}")]
    Input(String),

    /// Training produced a non-finite loss.
    #[error("numerical divergence: {0}")]
    Divergence(String),

    /// A file failed magic/CRC/structure validation.
    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
