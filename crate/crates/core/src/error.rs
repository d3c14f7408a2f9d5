use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a documented precondition.
    #[error("domain error: {0}")]
    Domain(String),

    /// Kernel matrix could not be factorized even after jitter escalation.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Weather data was malformed, incomplete or had gaps.
    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error(transparent)]
    Evaluation(#[from] EvalError),

    /// More than half of an iteration's proposals failed to evaluate.
    #[error("optimization aborted: {0}")]
    Aborted(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

/// Failure of a single simulator call.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum EvalError {
    #[error("scenario `{scenario}` too short: needs day-of-year {needed}, has {available}")]
    ScenarioTooShort {
        scenario: String,
        needed: u32,
        available: u32,
    },

    #[error("decision space is missing variable `{0}` required by the evaluator")]
    MissingVariable(String),

    #[error("external process exited with {status}; output:\n{output}")]
    ProcessFailed { status: String, output: String },

    #[error("external process timed out after {seconds} s; output:\n{output}")]
    Timeout { seconds: f64, output: String },

    #[error("could not parse yield: {reason}; output:\n{output}")]
    Unparseable { reason: String, output: String },

    #[error("evaluator returned invalid yield {0}")]
    InvalidYield(f64),

    #[error("evaluator setup failed: {0}")]
    Setup(String),
}
