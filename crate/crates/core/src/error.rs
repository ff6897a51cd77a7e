use thiserror::Error;

use crate::lfqgs::LfqgsTrajectory;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("state has {got} variables but the model has {expected}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("variable index {index} out of range for a model with {num_variables} variables")]
    InvalidIndex { index: usize, num_variables: usize },

    #[error("value index {value} outside a domain of size {domain_size}")]
    InvalidValue { value: usize, domain_size: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("enumerating {states:.3e} states exceeds the budget of {budget}")]
    BudgetExceeded { states: f64, budget: u64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("flip probability {p_flip:.3e} is below the absorbing threshold")]
    Absorbing { p_flip: f64 },

    #[error("every flip candidate is tabu after {flips} flips")]
    ExhaustedNeighborhood {
        flips: usize,
        partial: Box<LfqgsTrajectory>,
    },

    #[error("model file: {0}")]
    Format(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
