use std::fmt;

use thiserror::Error;

/// A formula syntax error pointing at a byte offset in the input text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub text: String,
    pub position: usize,
    pub message: String,
}

impl ParseError {
    /// Renders the formula with a caret under the offending position.
    pub fn caret(&self) -> String {
        let col = self.text[..self.position.min(self.text.len())].chars().count();
        format!("{}\n{}^", self.text, " ".repeat(col))
    }
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "formula syntax error at position {}: {}",
            self.position, self.message
        )
    }
}

impl std::error::Error for ParseError {}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("data error: {0}")]
    Data(String),

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("grouping factor `{0}` is not a factor column")]
    NonFactorGroup(String),

    #[error("factor `{0}` has a single level; contrasts need at least two")]
    SingleLevel(String),

    #[error("fixed-effects matrix is rank deficient (rank {rank} < {cols} columns)")]
    RankDeficientX { rank: usize, cols: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("theta outside bounds: {0}")]
    Bounds(String),

    #[error("penalized least-squares system is not positive definite")]
    NotPositiveDefinite,

    #[error("models are not nested: {0}")]
    NotNested(String),

    #[error("fits were computed on different data")]
    DataMismatch,

    #[error("model has no random-effects terms")]
    NoRandomTerms,

    #[error("covariance matrix is not symmetric positive semidefinite: {0}")]
    NotPsd(String),

    #[error("unbalanced layout: {0}")]
    Unbalanced(String),

    #[error("nothing removable: {0}")]
    NothingRemovable(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
