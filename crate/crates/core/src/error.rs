use thiserror::Error;

/// Library-wide error type. `exit_class` distinguishes data problems
/// (malformed input, exit code 2) from numerical failures (exit code 3)
/// for the command-line front end.
#[derive(Debug, Error)]
pub enum VioError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("clone window is empty")]
    EmptyCloneWindow,

    #[error("clone id/timestamp not monotone (id {clone_id}, t {timestamp})")]
    NonMonotoneClone { clone_id: u64, timestamp: f64 },

    #[error("baseline between views is degenerate ({norm:.3e} m)")]
    DegenerateBaseline { norm: f64 },

    #[error("feature has nonpositive depth in view {view}")]
    NegativeDepth { view: usize },

    #[error("track has too few usable observations ({got}, need {need})")]
    TooFewObservations { got: usize, need: usize },

    #[error("innovation covariance is not positive definite")]
    SingularInnovation,

    #[error("prediction covariance is singular in the backward pass")]
    SingularPrediction,

    #[error("matrix operation failed: {0}")]
    Numerical(String),

    #[error("timestamps not strictly increasing at t = {0}")]
    NonMonotoneTime(f64),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for VioError {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            match e.into_kind() {
                csv::ErrorKind::Io(io) => VioError::Io(io),
                _ => VioError::Parse("csv io error".into()),
            }
        } else {
            VioError::Parse(e.to_string())
        }
    }
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitClass {
    /// Unreadable or malformed data / configuration (exit 2).
    Data,
    /// Numerical failure during estimation (exit 3).
    Numerical,
}

impl VioError {
    pub fn exit_class(&self) -> ExitClass {
        match self {
            VioError::Parse(_) | VioError::Config(_) | VioError::Io(_) => ExitClass::Data,
            _ => ExitClass::Numerical,
        }
    }
}
