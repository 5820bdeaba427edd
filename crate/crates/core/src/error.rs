use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("invalid probability vector: {0}")]
    InvalidProbability(String),

    #[error("index {index} out of range 1..={max}")]
    IndexOutOfRange { index: usize, max: usize },

    #[error("refusing {what}: size {size} exceeds limit {limit}")]
    TooLarge {
        what: &'static str,
        size: usize,
        limit: usize,
    },

    #[error("state budget of {budget} exceeded at stage {stage} ({count} states)")]
    Budget {
        stage: usize,
        count: usize,
        budget: usize,
    },

    #[error("action level {level}: {source}")]
    AtLevel { level: usize, source: Box<Error> },

    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error("unknown evaluation model `{0}` (expected exact, state-quantized or triply-quantized)")]
    UnknownModel(String),
}

impl Error {
    /// True when the error, or the one it wraps, is a state budget overrun.
    pub fn is_budget(&self) -> bool {
        match self {
            Error::Budget { .. } => true,
            Error::AtLevel { source, .. } => source.is_budget(),
            _ => false,
        }
    }
}
