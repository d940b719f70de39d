use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Io,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Io => 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("{op}: window {kernel}x{kernel} (stride {stride}) does not fit input {input}")]
    WindowTooLarge {
        op: &'static str,
        kernel: usize,
        stride: usize,
        input: Shape,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad magic: expected \"EBN1\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported model format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("layer `{layer}` references missing tensor `{key}`")]
    DanglingWeightRef { layer: String, key: String },
    #[error("layer `{layer}` reads from `{input}`, which is not an earlier layer")]
    NotADag { layer: String, input: String },
    #[error("payload length mismatch for tensor `{name}`: expected {expected} bytes, found {actual}")]
    PayloadLengthMismatch {
        name: String,
        expected: usize,
        actual: usize,
    },
    #[error("invalid model graph: {0}")]
    InvalidGraph(String),
    #[error("malformed model header: {0}")]
    Header(#[from] serde_json::Error),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("layer `{0}` is not on any path from the classifier head")]
    TargetNotUpstream(String),
    #[error("class index {index} out of range for {num_classes} classes")]
    ClassOutOfRange { index: usize, num_classes: usize },

    #[error("brand `{0}` has no positive images")]
    EmptyPositives(String),
    #[error("brand `{0}` has no negative images")]
    EmptyNegatives(String),
    #[error("histogram bin counts differ: {0} vs {1}")]
    BinCountMismatch(usize, usize),
    #[error("unknown brand `{0}`")]
    UnknownBrand(String),
    #[error("requested {requested} examples but only {available} images are scored")]
    TooManyExamples { requested: usize, available: usize },

    #[error("{path}:{line}: duplicate image id `{id}`")]
    DuplicateId {
        path: PathBuf,
        line: u64,
        id: String,
    },
    #[error("{path}:{line}: unknown group `{token}` (expected logo, repeated_logo or no_logo)")]
    UnknownGroup {
        path: PathBuf,
        line: u64,
        token: String,
    },
    #[error("{path}:{line}: unknown split `{token}` (expected train or test)")]
    UnknownSplit {
        path: PathBuf,
        line: u64,
        token: String,
    },
    #[error("{path}:{line}: {message}")]
    Table {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt image: {0}")]
    CorruptImage(String),
    #[error("corrupt map dump: {0}")]
    CorruptDump(String),

    #[error("inputs do not line up: {0}")]
    Mismatch(String),
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),
    #[error("no image is both annotated and scored")]
    EmptyOverlap,

    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } => ErrorClass::Io,
            Error::Config(_)
            | Error::InvalidArgument(_)
            | Error::UnknownLayer(_)
            | Error::TargetNotUpstream(_)
            | Error::ClassOutOfRange { .. }
            | Error::UnknownBrand(_)
            | Error::TooManyExamples { .. } => ErrorClass::Config,
            _ => ErrorClass::Data,
        }
    }
}
