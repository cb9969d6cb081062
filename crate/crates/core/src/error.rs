use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("sites {0:?} and {1:?} are not neighbours")]
    NotNeighbors([i64; 3], [i64; 3]),
    #[error("cannot draw {requested} distinct neighbours out of {available}")]
    TooManyNeighbors { requested: u64, available: u64 },
    #[error("site {0:?} lies outside the stored window")]
    OutsideWindow([i64; 3]),
    #[error("window budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error("window contains no lattice point")]
    EmptyWindow,
    #[error("function is negative at {0:?}")]
    NegativeFunction([i64; 3]),
    #[error("immigration schedule violation: {0}")]
    ScheduleViolation(String),
    #[error("coupling invariant violated: {0}")]
    CouplingViolation(String),
    #[error("lambda outside the validity regime: {0}")]
    InvalidRegime(String),
}

pub type Result<T> = std::result::Result<T, Error>;
