use cfn_autograd::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CfnError>;

#[derive(Debug, Error)]
pub enum CfnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("clip has {len} frames after striding but the fine stream accepts at most {cap}; split the video into segments of at most {cap} strided frames")]
    ClipTooLong { len: usize, cap: usize },

    #[error("numerical failure: {0}")]
    NonFinite(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),

    #[error("truncated file: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },

    #[error("checkpoint parameters do not match the model: {}", offenders.join(", "))]
    ParamMismatch { offenders: Vec<String> },

    #[error("bad data: {0}")]
    Data(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CfnError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CfnError::Io {
            context: context.into(),
            source,
        }
    }
}
