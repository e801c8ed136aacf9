use thiserror::Error;

/// Errors raised by the numerical library and its I/O layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error(
        "{op}: shape mismatch, left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}"
    )]
    Shape {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("{0}")]
    InvalidInput(String),

    #[error("non-finite value at coordinate {coordinate} of the finite-difference probe")]
    NonFiniteProbe { coordinate: usize },

    #[error("non-finite {component} loss{}", .utterance.as_ref().map(|u| format!(" on utterance {u}")).unwrap_or_default())]
    NonFiniteLoss {
        component: &'static str,
        utterance: Option<String>,
    },

    #[error("CTC target of length {target_len} ({repeats} adjacent repeats) is unreachable in {frames} frames")]
    Unreachable {
        frames: usize,
        target_len: usize,
        repeats: usize,
    },

    #[error("brute-force CTC instance too large: {paths} paths")]
    TooLarge { paths: u128 },

    #[error("row {row} has zero norm")]
    ZeroNorm { row: usize },

    #[error("token id {id} at position {position} is outside the vocabulary of size {vocab}")]
    OutOfVocabulary {
        id: usize,
        position: usize,
        vocab: usize,
    },

    #[error("line {line}: {message}")]
    Data { line: usize, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape {
            op,
            left_rows: left.0,
            left_cols: left.1,
            right_rows: right.0,
            right_cols: right.1,
        }
    }

    /// True for errors caused by numerical failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteLoss { .. } | Error::NonFiniteProbe { .. }
        )
    }
}
