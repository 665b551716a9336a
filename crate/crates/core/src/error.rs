use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, ranges, weights).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value at index {index} ({context})")]
    NonFinite { index: usize, context: String },

    /// Invalid configuration value. `line` is set when the value came from a config file.
    #[error("config error{}: {key}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Config {
        key: String,
        line: Option<usize>,
        message: String,
    },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("chain does not mix: {0}")]
    NonMixing(String),

    #[error("transition matrix structure: {0}")]
    Structure(String),

    #[error("degenerate edge {edge}: {message}")]
    DegenerateEdge { edge: usize, message: String },

    #[error("trace gap: vehicle {vehicle} missing at step {step}")]
    TraceGap { step: usize, vehicle: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("vehicle {vehicle}: {source}")]
    Vehicle {
        vehicle: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("bound conditions violated: {0}")]
    Conditions(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            line: None,
            message: message.into(),
        }
    }
}
