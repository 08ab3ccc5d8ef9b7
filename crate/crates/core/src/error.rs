use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape {0:?}: every extent must be at least 1")]
    InvalidShape([usize; 4]),

    #[error("data length {got} does not match shape {shape} ({expected} elements)")]
    DataLength {
        shape: Shape,
        expected: usize,
        got: usize,
    },

    #[error("{op}: {dim} mismatch, expected {expected}, got {got}")]
    DimMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: shapes {lhs} and {rhs} are not compatible")]
    Incompatible {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },

    #[error("{op}: output {dim} would be empty")]
    EmptyOutput { op: &'static str, dim: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: [usize; 4],
        got: [usize; 4],
    },

    #[error("unexpected parameter `{0}`")]
    UnexpectedParam(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

/// Failures while decoding a weight file.
#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("tensor name is not valid UTF-8 at offset {0}")]
    InvalidName(usize),
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("tensors out of lexicographic order at `{0}`")]
    Unordered(String),
    #[error("shape overflow for tensor `{0}`")]
    ShapeOverflow(String),
    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
