use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("feature dimension mismatch: expected {expected}, got {actual}")]
    FeatureDim { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid primitive {index}: {reason}")]
    InvalidPrimitive { index: usize, reason: String },

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("primitive {0} has no label")]
    MissingLabel(usize),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error(
        "non-finite loss at step {step} (view {view}, frame {frame}): \
         cc={cc} align={align} dino={dino}"
    )]
    Diverged {
        step: usize,
        view: usize,
        frame: usize,
        cc: f64,
        align: f64,
        dino: f64,
    },

    #[error("too few points for clustering: {got} < {need}")]
    TooFewPoints { got: usize, need: usize },

    #[error("clustering produced no clusters")]
    NoClusters,

    #[error("unknown instance label {0}")]
    UnknownLabel(i32),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
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
}
