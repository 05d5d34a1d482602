use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape {shape:?} does not describe {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("{op}: expected {expected} channels, got {got}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("input too short: length {len} with kernel {kernel}, stride {stride}, padding {padding}")]
    InputTooShort {
        len: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },

    #[error("{op}: axis {axis} out of range for rank {ndim}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        ndim: usize,
    },

    #[error("reduction over an empty axis set")]
    EmptyReduction,

    #[error("backward() needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward() already ran on this tape; call zero_grad() first")]
    AlreadyBackpropagated,

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
}

impl TensorError {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}
