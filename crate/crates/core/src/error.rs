use std::fmt;

/// Crate-wide result alias.
pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure category, used by the command-line driver to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad argument or configuration value.
    Usage,
    /// Malformed or inconsistent input data.
    InputFormat,
    /// A computed result broke one of the toolkit's own invariants.
    Invariant,
}

impl ErrorClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::Usage => "usage",
            ErrorClass::InputFormat => "input-format",
            ErrorClass::Invariant => "invariant",
        }
    }
}

impl fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected:?} (rows, cols), got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error(
        "annotation {annotation}: {role} keypoint ({x}, {y}) lies outside the {cols}x{rows} output grid at stride {stride}"
    )]
    KeypointOutOfBounds {
        annotation: usize,
        role: &'static str,
        x: f64,
        y: f64,
        cols: usize,
        rows: usize,
        stride: u32,
    },

    #[error("object count must be at least 1 for a non-empty prediction")]
    ZeroObjects,

    #[error("evaluation set contains no lesions")]
    NoLesions,

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("truncated payload: header declares {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("row {row}: {message}")]
    MalformedRow { row: usize, message: String },

    #[error("missing required column `{0}`")]
    MissingColumn(String),

    #[error("schema violation at `{path}`: {message}")]
    Schema { path: String, message: String },

    #[error("infeasible scene: {0}")]
    InfeasibleScene(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_) | Error::ZeroObjects => ErrorClass::Usage,
            Error::Invariant(_) => ErrorClass::Invariant,
            _ => ErrorClass::InputFormat,
        }
    }
}
