use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("shape {0:?} has a zero extent")]
    EmptyShape(Vec<usize>),
    #[error("rank {0} is outside the supported range 1..=5")]
    UnsupportedRank(usize),
    #[error("{order:?} is not a permutation of {rank} axes")]
    InvalidPermutation { order: Vec<usize>, rank: usize },
    #[error("inner dimensions differ: [{m}, {k_left}] x [{k_right}, {n}]")]
    InnerDimMismatch {
        m: usize,
        k_left: usize,
        k_right: usize,
        n: usize,
    },
    #[error("non-finite value in input")]
    NonFiniteInput,
    #[error("channel mismatch: weights expect {expected} input channels, tensor has {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("convolution output extent would be < 1 (input {input}, kernel {kernel}, stride {stride}, padding {padding})")]
    ShapeUnderflow {
        input: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    #[error("expected rank {expected}, got rank {actual}")]
    RankMismatch { expected: usize, actual: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this tape; reset it first")]
    BackwardAlreadyRun,
    #[error("function returned {first} and then {second} at the same point")]
    NonDeterministicFunction { first: f64, second: f64 },
    #[error("finite-difference step {0} outside [1e-7, 1e-3]")]
    InvalidStep(f64),
    #[error("attention map of side {side} exceeds the limit of {limit}")]
    AttentionMapTooLarge { side: usize, limit: usize },
    #[error("shape has a zero extent")]
    ZeroExtent,
    #[error("invalid placement {0:?}: expected one of 000, 010, 101, 111")]
    InvalidPlacement(String),
    #[error("spatial extent {extent} is not divisible by {divisor}")]
    IndivisibleExtent { extent: usize, divisor: usize },
    #[error("class rate {0} is outside (0, 1)")]
    InvalidRate(f64),
    #[error("label value {0} is not a valid class index")]
    InvalidLabel(f64),
    #[error("cannot place lesions at rate {target} within tolerance in a {dims:?} volume")]
    RateUnreachable { target: f64, dims: [usize; 3] },
    #[error("crop {crop:?} exceeds volume {dims:?}")]
    CropTooLarge { crop: [usize; 3], dims: [usize; 3] },
    #[error("bad magic bytes in volume file")]
    BadMagic,
    #[error("unsupported volume format version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported element width code {0}")]
    UnsupportedElementWidth(u8),
    #[error("element width {found} does not match requested {expected}")]
    ElementWidthMismatch { expected: u8, found: u8 },
    #[error("volume file is truncated")]
    TruncatedFile,
    #[error("{0} unexpected bytes after the checksum")]
    TrailingBytes(usize),
    #[error("payload checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("cannot split {total} ids with {n_train} for training")]
    InvalidSplit { n_train: usize, total: usize },
    #[error("tensor is not binary")]
    NonBinary,
    #[error("empty input")]
    EmptyInput,
    #[error("incompatible checkpoint at {path}: {reason}")]
    IncompatibleCheckpoint { path: PathBuf, reason: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
