use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs} and {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("{op}: kernel {kernel} larger than input {input} under valid padding")]
    KernelTooLarge {
        op: &'static str,
        kernel: String,
        input: String,
    },

    #[error("invalid tensor: shape {shape} implies {expected} elements, got {actual}")]
    BadTensor {
        shape: String,
        expected: usize,
        actual: usize,
    },

    #[error("backward requires a scalar root, got shape {shape}")]
    NonScalarRoot { shape: String },

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("invalid environment config: {0}")]
    InvalidEnvConfig(String),

    #[error("action index {index} out of range for {variant} action set of size {count}")]
    ActionOutOfRange {
        index: usize,
        count: usize,
        variant: String,
    },

    #[error("policy index {index} out of range, model has {count} policies")]
    PolicyOutOfRange { index: usize, count: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("config error: unknown key `{key}`{}", context.as_ref().map(|c| format!(" ({c})")).unwrap_or_default())]
    UnknownKey {
        key: String,
        context: Option<String>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint does not match config: {0}")]
    CheckpointMismatch(String),

    #[error("non-finite value in {what} at training step {step}")]
    Divergence { step: usize, what: String },

    #[error("probe set is empty")]
    EmptyProbeSet,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 config, 2 runtime, 3 i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::UnknownKey { .. }
            | Error::InvalidEnvConfig(_)
            | Error::CheckpointMismatch(_) => 1,
            Error::Io(_) | Error::Checkpoint(_) => 3,
            _ => 2,
        }
    }
}
