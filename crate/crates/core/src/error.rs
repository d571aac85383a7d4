use std::path::PathBuf;

use thiserror::Error;

use crate::model::NeuronRef;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            Self::Config => 2,
            Self::Data => 3,
            Self::Numeric => 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    // -- numerics --
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("degenerate steer: {0}")]
    DegenerateSteer(String),

    // -- model --
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("sequence length {len} outside 1..={max}")]
    SequenceLength { len: usize, max: usize },
    #[error("neuron {0} out of range")]
    NeuronOutOfRange(NeuronRef),
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    // -- checkpoint --
    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),
    #[error("tensor {name}: declared {found:?}, config implies {expected:?}")]
    TensorShape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    // -- patching / repair --
    #[error("patch on {0} was already reverted")]
    AlreadyReverted(NeuronRef),
    #[error("cannot revert patch on {0}: parameters were modified after it was applied")]
    RevertMismatch(NeuronRef),
    #[error("not a failure: token {target} is already the argmax")]
    NotAFailure { target: usize },

    // -- data / io --
    #[error("invalid data: {0}")]
    Data(String),
    #[error("refusing to overwrite {0} (pass --force)")]
    WouldOverwrite(PathBuf),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Self::Shape { .. }
            | Self::NonFinite(_)
            | Self::Empty(_)
            | Self::DegenerateSteer(_)
            | Self::Diverged { .. } => ErrorClass::Numeric,
            Self::Config(_) | Self::WouldOverwrite(_) => ErrorClass::Config,
            _ => ErrorClass::Data,
        }
    }
}
