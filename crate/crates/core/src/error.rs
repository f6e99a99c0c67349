use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("{variable} = {value:.4} left the admissible range [{lo}, {hi}]")]
    OutOfRange {
        variable: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("PI tuning failed: {0}")]
    Tuning(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("rank deficient: truncated SVD retained {retained} directions, {requested} requested")]
    RankDeficient { retained: usize, requested: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("model is not stable (spectral radius {0:.6} >= 1)")]
    Unstable(f64),

    #[error("constraint structure changed: {0}")]
    ShapeChange(String),

    #[error("admissible slice is empty at the given state")]
    EmptySlice,

    #[error("QP solver hit the iteration cap ({0})")]
    QpMaxIterations(usize),

    #[error("QP is infeasible (constraint {constraint} cannot be added)")]
    QpInfeasible { constraint: usize },

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("schema error: missing columns {0:?}")]
    MissingColumns(Vec<String>),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("step {step} (t = {time:.1} s): {source}")]
    Step {
        step: usize,
        time: f64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn at_step(self, step: usize, time: f64) -> Self {
        Error::Step {
            step,
            time,
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping step wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Step { source, .. } => source.root(),
            other => other,
        }
    }
}
