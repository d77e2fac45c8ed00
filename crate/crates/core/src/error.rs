use thiserror::Error;

/// Errors produced by the engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("parameter out of domain: {0}")]
    ParameterDomain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate posterior: observation at level {level} leaves zero total mass")]
    DegeneratePosterior { level: f64 },

    #[error("no estimate available: {0}")]
    NoEstimate(String),

    #[error("out-of-order trial: expected index {expected}, got {got}")]
    Sequencing { expected: usize, got: usize },

    #[error("session complete")]
    SessionComplete,

    #[error("invalid session state: {0}")]
    State(String),

    #[error("integrity violation at trial {trial_index}: {reason}")]
    Integrity { trial_index: usize, reason: String },

    #[error("event log integrity violation at event {seq}: {reason}")]
    EventIntegrity { seq: u64, reason: String },

    #[error("bitrate {bitrate_kbps:.3} kbps is not covered by any resolution")]
    Coverage { bitrate_kbps: f64 },

    #[error("ingest error at row {row}: {message}")]
    Ingest { row: usize, message: String },

    #[error("comparison graph is disconnected: components {components:?}")]
    Identifiability { components: Vec<Vec<usize>> },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("degenerate scale: {0}")]
    DegenerateScale(String),

    #[error("fit failed: {0}")]
    FitFailure(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("cannot form confidence interval: {0}")]
    NoCi(String),

    #[error("effect size undefined: {0}")]
    UndefinedEffect(String),

    #[error("I/O error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        match e.position() {
            Some(pos) => Error::Ingest {
                row: pos.line() as usize,
                message: e.to_string(),
            },
            None => Error::Parse(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
