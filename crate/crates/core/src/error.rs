use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, ranks or sizes that the operation cannot accept.
    #[error("rejected input: {0}")]
    InvalidInput(String),

    /// A column of `W0 + BA` has zero norm, so its direction is undefined.
    #[error("degenerate direction: column {column} of the directional matrix has zero norm")]
    DegenerateDirection { column: usize },

    #[error("invalid rotation: {0}")]
    InvalidRotation(String),

    #[error("degenerate orthogonalization: singular value {0:e} is too small")]
    DegenerateOrthogonalization(f64),

    #[error("no valid pixels in the loss mask")]
    NoValidPixels,

    #[error("non-finite loss{}: {detail}", batch_index.map(|i| format!(" in batch {i}")).unwrap_or_default())]
    NonFiniteLoss {
        batch_index: Option<usize>,
        detail: String,
    },

    #[error("non-finite gradient for {0}")]
    NonFiniteGradient(String),

    #[error("degenerate prediction: {0}")]
    DegeneratePrediction(String),

    #[error("trajectory alignment failed: {0}")]
    Alignment(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn parse(offset: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: msg.into(),
        }
    }

    /// Process exit code used by the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidInput(_) => 2,
            Error::Parse { .. } | Error::Io(_) => 4,
            _ => 3,
        }
    }
}
