use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite input to {0}")]
    NonFinite(&'static str),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("empty source sequence")]
    EmptySource,

    #[error("degenerate representation: zero-norm vector")]
    Degenerate,

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("objective is not deterministic: two forward passes gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("gradient check failed: worst tensor `{name}` has relative error {error:e} (tolerance {tol:e})")]
    GradCheck { name: String, error: f64, tol: f64 },

    #[error("no manifest in {0}")]
    NoManifest(PathBuf),

    #[error("missing modality file {0}")]
    MissingFile(PathBuf),

    #[error("{file}: expected {expected} but found {found}")]
    FileShape {
        file: PathBuf,
        expected: String,
        found: String,
    },

    #[error("{file}: non-finite value at element {index}")]
    NonFiniteData { file: PathBuf, index: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("unknown sample id {0}")]
    UnknownSample(usize),

    #[error("checkpoint does not match model: {0}")]
    Checkpoint(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used in CLI error reports and FFI codes.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite(_) | Error::NonFiniteData { .. } => "non_finite",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::EmptySource => "empty_source",
            Error::Degenerate => "degenerate",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::Config { .. } => "config",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonDeterministic { .. } => "non_deterministic",
            Error::GradCheck { .. } => "gradcheck",
            Error::NoManifest(_) | Error::MissingFile(_) | Error::FileShape { .. } => "data",
            Error::EmptyDataset => "empty_dataset",
            Error::UnknownSample(_) => "unknown_sample",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Json(_) | Error::Toml(_) => "parse",
        }
    }
}
