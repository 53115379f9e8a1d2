use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{what}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        what: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{what} would need {needed} elements, budget is {budget}; pool the features first")]
    Budget {
        what: &'static str,
        needed: usize,
        budget: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("every pixel is ignored; the masked mean is undefined")]
    AllIgnored,
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("pixel ({row}, {col}) is not covered by any tile")]
    Uncovered { row: usize, col: usize },
    #[error("training diverged at step {step}: {message}")]
    Diverged { step: usize, message: String },
    #[error(transparent)]
    Nn(#[from] drd_nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
