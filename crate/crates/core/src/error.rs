use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate 6D rotation: normalization denominator {0:.3e} below 1e-8")]
    DegenerateRotation(f64),

    #[error("matrix is not a rotation (orthonormality residual {0:.3e})")]
    NotARotation(f64),

    #[error("jitter window [{start}, {end}) exceeds sequence length {len}")]
    WindowOutOfRange { start: usize, end: usize, len: usize },

    #[error("clip length {0} s is below the 10 s minimum")]
    InvalidClipLength(f64),

    #[error("modality mismatch in sample `{sample}` on axis `{axis}`: {detail}")]
    ModalityMismatch {
        sample: String,
        axis: String,
        detail: String,
    },

    #[error("sequence too short: need at least {need} frames, got {got}")]
    TooShort { need: usize, got: usize },

    #[error("need at least {need} samples, got {got}")]
    InsufficientSamples { need: usize, got: usize },

    #[error("feature sets are incompatible: {0}")]
    FeatureMismatch(String),

    #[error("matrix square root did not converge (relative residual {0:.3e})")]
    NonConvergentSqrt(f64),

    #[error("beat alignment needs at least one music beat")]
    NoMusicBeats,

    #[error("smoothing objective became non-finite at iteration {0}")]
    NonFiniteObjective(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid motion: {0}")]
    InvalidMotion(String),

    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("sample `{sample}`: {source}")]
    InSample {
        sample: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn in_sample(self, sample: impl Into<String>) -> Self {
        Error::InSample {
            sample: sample.into(),
            source: Box::new(self),
        }
    }

    /// True for failures that come from the filesystem rather than from the data.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. } => true,
            Error::InSample { source, .. } => source.is_io(),
            _ => false,
        }
    }

    /// True for numeric breakdowns (non-finite objectives, failed matrix roots, degenerate frames).
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFiniteObjective(_)
            | Error::NonConvergentSqrt(_)
            | Error::DegenerateRotation(_) => true,
            Error::InSample { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
