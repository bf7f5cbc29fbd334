use alloc::string::String;

use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("sequence at line {line} has length {len}, exceeding max_len {max_len}")]
    TooLong {
        line: usize,
        len: usize,
        max_len: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid span [{l}, {r}] over {n} tokens")]
    InvalidSpan { l: usize, r: usize, n: usize },
    #[error("sequence length {len} exceeds the estimator cap of {cap}")]
    SequenceCap { len: usize, cap: usize },
    #[error("invalid config: {field}: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
    #[error("tree parse error at line {line}: {reason}")]
    TreeParse { line: usize, reason: String },
    #[error("bpe labels do not align with tree leaves: {0}")]
    LabelAlignment(String),
    #[error("length mismatch in {op}: {left} vs {right}")]
    LengthMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
}
