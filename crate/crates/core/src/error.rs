use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: extent {extent} is not divisible by {divisor}; pad the input first")]
    PadRequired {
        op: &'static str,
        extent: usize,
        divisor: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Invalid(String),

    #[error("label {label} at pixel (row {row}, col {col}) is outside [0, {num_classes}) and is not the ignore index")]
    LabelOutOfRange {
        label: usize,
        row: usize,
        col: usize,
        num_classes: usize,
    },

    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("malformed {kind}: {msg}")]
    Format { kind: &'static str, msg: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn format(kind: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            kind,
            msg: msg.into(),
        }
    }
}
