use std::path::PathBuf;

/// Errors raised anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("batch norm {0} evaluated before its running statistics were initialized")]
    UninitializedStats(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("class {0} has no labelled pixels")]
    EmptyClass(usize),

    #[error("not an AWMF checkpoint")]
    BadMagic,

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),

    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),

    #[error("malformed image header: {0}")]
    MalformedHeader(String),

    #[error("image extents {width}x{height} overflow")]
    ExtentOverflow { width: usize, height: usize },

    #[error("unexpected end of pixel data")]
    UnexpectedEof,

    #[error("manifest {path}:{line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },

    #[error("training diverged during {stage} (epoch {epoch}, batch {batch}): {msg}")]
    Divergence {
        stage: &'static str,
        epoch: usize,
        batch: usize,
        msg: String,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
