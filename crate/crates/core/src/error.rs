//! Crate-wide error type and the process exit codes derived from it.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, WxError>;

#[derive(Debug, Error)]
pub enum WxError {
    /// Invalid configuration value or config file schema violation.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset, manifest, vocabulary, or image decoding problem.
    #[error("data error: {0}")]
    Data(String),

    /// Tensor or image dimensions do not match what an operation requires.
    #[error("shape mismatch in {site}: expected {expected:?}, got {got:?}")]
    Shape {
        site: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// A checkpoint tensor does not match the model architecture.
    #[error("checkpoint mismatch for `{name}`: {reason}")]
    Checkpoint { name: String, reason: String },

    /// Non-finite value where the pipeline requires finite arithmetic.
    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl WxError {
    pub fn shape(site: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        WxError::Shape {
            site: site.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        WxError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code contract: 0 success, 2 config error, 3 data error,
    /// 4 numerical abort, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            WxError::Config(_) => 2,
            WxError::Data(_) | WxError::Io { .. } => 3,
            WxError::Numerical(_) => 4,
            _ => 1,
        }
    }
}
