use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("empty axis in {0}")]
    EmptyAxis(&'static str),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("unbound leaf: parameter `{0}` is not in the store")]
    UnboundLeaf(String),
    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("index {index} out of range (limit {limit}) in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("slot {slot} is finished and cannot take insertions")]
    SlotFinished { slot: usize },
    #[error("invalid token id {0}")]
    InvalidToken(usize),
    #[error("posterior row {row} is not normalized (mass {mass})")]
    NotNormalized { row: usize, mass: f64 },
    #[error("instance too large for enumeration: {0}")]
    EnumerationBound(String),
    #[error("target is infeasible for CTC: {frames} frames < {required} required")]
    InfeasibleCtc { frames: usize, required: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("input too long: {len} > {max} ({what})")]
    TooLong {
        what: &'static str,
        len: usize,
        max: usize,
    },
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("malformed {what} at line {line}: {msg}")]
    Parse {
        what: String,
        line: usize,
        msg: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
