//! Error taxonomy shared across the crate.
//!
//! Exit-code mapping for the CLI: validation/config/IO problems are
//! recoverable user errors (exit 2), numerical failures abort (exit 3).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AvatarError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("degenerate blend: blended transform condition number {cond:.3e} exceeds 1e8")]
    DegenerateBlend { cond: f64 },

    #[error("degenerate normal: gradient norm {norm:.3e} below 1e-8")]
    DegenerateNormal { norm: f64 },

    #[error("no visible input view for sample {sample}")]
    NoVisibility { sample: usize },

    #[error("non-finite value in {context} at iteration {iteration}")]
    NonFinite { context: String, iteration: usize },

    #[error("contract violation: {0}")]
    Contract(String),
}

impl AvatarError {
    pub fn validation(msg: impl Into<String>) -> Self {
        AvatarError::Validation(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        AvatarError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI surface.
    pub fn exit_code(&self) -> i32 {
        match self {
            AvatarError::Validation(_) | AvatarError::Io { .. } | AvatarError::Contract(_) => 2,
            AvatarError::DegenerateBlend { .. }
            | AvatarError::DegenerateNormal { .. }
            | AvatarError::NoVisibility { .. }
            | AvatarError::NonFinite { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, AvatarError>;
