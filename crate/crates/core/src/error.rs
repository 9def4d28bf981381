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
    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("objective refers to nonexistent target: {0}")]
    UnknownObjective(String),
    #[error("objective diverged at step {step}")]
    Divergence { step: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("shape inconsistency at layer {layer}: {detail}")]
    ShapeInconsistency { layer: usize, detail: String },
    #[error("truncated blob {path}: expected {expected} bytes, found {found}")]
    TruncatedBlob {
        path: PathBuf,
        expected: u64,
        found: u64,
    },
    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no usable files in {0}")]
    NoUsableFiles(PathBuf),

    #[error("saliency map is zero everywhere")]
    AllZeroSaliency,
    #[error("spectrum grid is constant; no threshold separates it")]
    DegenerateSpectrum,
    #[error("both binary patterns are empty")]
    EmptyUnion,
    #[error("activation distribution has zero variance")]
    ConstantDistribution,
    #[error("no profile for class {0:?}")]
    MissingProfile(String),
    #[error("no class reached the minimum sample count of {min_samples}")]
    NoClassesProfiled { min_samples: usize },

    #[error("waveform has {len} samples, shorter than one frame of {frame}")]
    TooShort { len: usize, frame: usize },
    #[error("sample rate {found} Hz does not match the configured {expected} Hz")]
    SampleRate { found: u32, expected: u32 },
    #[error("empty input: {0}")]
    Empty(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }

    /// Stable snake_case identifier written into report `reason` fields.
    pub fn reason_code(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidShape { .. } => "invalid_shape",
            Error::NonFinite(_) => "non_finite",
            Error::UnknownObjective(_) => "unknown_objective",
            Error::Divergence { .. } => "divergence",
            Error::InvalidConfig(_) => "invalid_config",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::ShapeInconsistency { .. } => "shape_inconsistency",
            Error::TruncatedBlob { .. } => "truncated_blob",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::NoUsableFiles(_) => "no_usable_files",
            Error::AllZeroSaliency => "all_zero_saliency",
            Error::DegenerateSpectrum => "degenerate_spectrum",
            Error::EmptyUnion => "empty_union",
            Error::ConstantDistribution => "constant_distribution",
            Error::MissingProfile(_) => "missing_profile",
            Error::NoClassesProfiled { .. } => "no_classes_profiled",
            Error::TooShort { .. } => "too_short",
            Error::SampleRate { .. } => "sample_rate",
            Error::Empty(_) => "empty",
        }
    }
}
