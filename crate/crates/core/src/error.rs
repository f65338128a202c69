use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("illegal action for agent {agent}: {detail}")]
    IllegalAction { agent: usize, detail: String },
    #[error("cannot step a terminal state")]
    TerminalState,
    #[error("coordinate out of range: {0}")]
    OutOfRange(String),
    #[error("enumeration too large: {0}")]
    TooLarge(String),
    #[error("unknown state key {0}")]
    UnknownKey(u64),
    #[error("negative virtual reward {value} at key {key}")]
    NegativeVirtualReward { key: u64, value: f64 },
    #[error("non-finite gradient entry for parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss value")]
    NonFinite,
    #[error("zero in- or out-flow at key {0}; divergence loss undefined")]
    ZeroFlow(u64),
    #[error("distributions live on different terminal sets ({0} vs {1})")]
    DomainMismatch(u64, u64),
    #[error("condition index {omega} outside [0, {k})")]
    BadOmega { omega: usize, k: usize },
    #[error("joint action space too large for centralized training: {0}")]
    TooLargeJointSpace(String),
    #[error("rollout did not terminate within {0} steps")]
    HorizonBug(u32),
    #[error("non-finite optimizer update for parameter {0}")]
    NonFiniteUpdate(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("missing metrics: {0}")]
    MissingMetrics(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
