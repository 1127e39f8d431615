//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("susceptance graph is disconnected")]
    DisconnectedGraph,

    #[error("model is unobservable: observability rank {rank} < {n} at depth {n}")]
    Unobservable { rank: usize, n: usize },

    #[error("initial-trajectory buffer not full: has {have} of {need} samples")]
    IniNotReady { have: usize, need: usize },

    #[error(
        "input data is not persistently exciting of order {order} \
         (Hankel rank {rank} < {rows}); collect a longer or richer excitation"
    )]
    NotPersistentlyExciting {
        order: usize,
        rank: usize,
        rows: usize,
    },

    #[error("data matrix is rank deficient: numerical rank {rank} < {rows} rows")]
    RankDeficientData { rank: usize, rows: usize },

    #[error("disturbance vertex count 2^{dims} exceeds cap {cap}; increase the downsampling factor M")]
    VertexCapExceeded { dims: usize, cap: usize },

    #[error("QP solver returned status {status}: {detail}")]
    SolverFailure { status: &'static str, detail: String },

    #[error("cost window [{start}, {end}) outside logged range of {len} samples")]
    WindowOutOfRange {
        start: usize,
        end: usize,
        len: usize,
    },

    #[error("CSV parse error at line {line}: {msg}")]
    CsvParse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            got,
        }
    }
}
