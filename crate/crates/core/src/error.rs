//! Crate-wide error type.
//!
//! Errors fall into two broad groups that the CLI maps onto exit codes:
//! usage problems (bad configuration, malformed files, unknown domains)
//! and runtime failures (numeric breakdown, I/O faults, integrity
//! violations).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MdError {
    /// An operation was handed tensors whose shapes do not line up.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid configuration or arguments (caller error).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An operation produced NaN or infinity.
    #[error("non-finite values produced by {op} ({count} of {total} elements)")]
    NonFinite {
        op: &'static str,
        count: usize,
        total: usize,
    },

    /// A numeric procedure failed to converge or hit a singular case.
    #[error("numeric failure in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    /// A serialized artifact is malformed (bad magic, version, sizes...).
    #[error("malformed file {path}: {detail}")]
    Format { path: String, detail: String },

    /// Underlying I/O failure, annotated with the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A domain index that the network has never seen.
    #[error("unknown domain {0}")]
    UnknownDomain(usize),

    /// Frozen parameters changed while a regime promised to keep them fixed.
    #[error("frozen-parameter integrity violation: {0}")]
    Integrity(String),

    /// Training diverged (loss became non-finite).
    #[error("training diverged: {0}")]
    Diverged(String),
}

impl MdError {
    /// True when the error is the caller's fault (bad arguments, bad config,
    /// malformed input files) as opposed to a runtime failure. The CLI maps
    /// usage errors to exit code 1 and runtime failures to exit code 2.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            MdError::Config(_)
                | MdError::Format { .. }
                | MdError::UnknownDomain(_)
                | MdError::Shape { .. }
        )
    }

    /// Convenience constructor for shape complaints.
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        MdError::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Convenience constructor for format complaints.
    pub fn format(path: impl Into<String>, detail: impl Into<String>) -> Self {
        MdError::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Convenience constructor wrapping an I/O error with its path.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        MdError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, MdError>;
