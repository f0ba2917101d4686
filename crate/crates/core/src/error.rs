use thiserror::Error;

/// Errors produced by the posenorm library.
#[derive(Debug, Error)]
pub enum Error {
    /// The two joints defining a body-scale length coincide.
    #[error("degenerate body: reference joints coincide")]
    DegenerateBody,

    #[error("zero-length direction vector")]
    ZeroVector,

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("evaluation over an empty set of images")]
    EmptyEval,

    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),

    #[error("canvas {height}x{width} too small for the configured skeleton")]
    CanvasTooSmall { height: usize, width: usize },

    /// Malformed input text. `offset` is the byte offset of the failure.
    #[error("parse error at line {line}, column {column} (byte {offset}): {message}")]
    Parse {
        line: usize,
        column: usize,
        offset: usize,
        message: String,
    },

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    /// Malformed binary container (SMAP1 / TNET1).
    #[error("bad {format} data at byte {offset}: {message}")]
    Format {
        format: &'static str,
        offset: usize,
        message: String,
    },

    #[error("training diverged at step {step} (loss = {loss})")]
    DivergenceDetected { step: usize, loss: f64, curve: Vec<f64> },

    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
