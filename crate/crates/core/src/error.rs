use std::path::PathBuf;

use crate::signal_io::ChannelRole;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    // signal_io
    #[error("missing channel {0}")]
    MissingChannel(ChannelRole),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("length mismatch on {role}: expected {expected} samples, found {found}")]
    LengthMismatch {
        role: ChannelRole,
        expected: usize,
        found: usize,
    },
    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),
    #[error("empty hypnogram file")]
    EmptyFile,
    #[error("invalid epoch length {0} s (allowed: 5, 10, 15, 30)")]
    InvalidEpoch(u32),

    // preprocess
    #[error("signal too short: {len} samples, need at least {min}")]
    SignalTooShort { len: usize, min: usize },
    #[error("unsupported rate conversion {fs_in} Hz -> {fs_out} Hz")]
    UnsupportedRate { fs_in: f64, fs_out: f64 },
    #[error("invalid filter: {0}")]
    InvalidFilter(String),
    #[error("degenerate segment (constant or non-varying derivative)")]
    DegenerateSegment,
    #[error("every candidate channel is degenerate")]
    AllDegenerate,
    #[error("too few recordings: {found}, need at least {min}")]
    TooFewRecordings { found: usize, min: usize },
    #[error("two EEG candidates at one site but no reference distribution supplied")]
    MissingReference,
    #[error("covariance is singular after regularization")]
    SingularCovariance,

    // encoding
    #[error("empty signal")]
    EmptySignal,
    #[error("95th percentile must be positive, got {0}")]
    NonpositiveP95(f64),

    // neuralnet
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient at parameter {index} ({name}) on update {step}")]
    NonFiniteGradient {
        index: usize,
        name: String,
        step: u64,
    },
    #[error("dataset too small: {0}")]
    DatasetTooSmall(String),
    #[error("invalid network config: {0}")]
    InvalidConfig(String),

    // hypnodensity
    #[error("invalid hypnodensity: {0}")]
    InvalidHypnodensity(String),
    #[error("resolution {target_s} s is not a multiple of {resolution_s} s")]
    IncompatibleResolution { resolution_s: u32, target_s: u32 },
    #[error("label sequences have different lengths ({0} vs {1})")]
    LengthDisagreement(usize, usize),
    #[error("no scored epochs to compare")]
    NoScoredEpochs,
    #[error("total epoch weight is zero")]
    ZeroTotalWeight,
    #[error("need at least {min} scorers, found {found}")]
    TooFewScorers { found: usize, min: usize },

    // diagnosis
    #[error("only one class present")]
    SingleClass,
    #[error("too few samples: {found}, need at least {min}")]
    TooFewSamples { found: usize, min: usize },
    #[error("cholesky factorization failed even with jitter {0}")]
    CholeskyFailure(f64),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical machinery (as opposed to bad input
    /// or I/O).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteGradient { .. }
                | Error::CholeskyFailure(_)
                | Error::SingularCovariance
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
