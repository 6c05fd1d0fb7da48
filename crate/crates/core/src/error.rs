use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value produced from finite inputs")]
    NonFinite { op: &'static str },

    #[error("non-finite state during integration at tau = {tau}")]
    NonFiniteState { tau: f64 },

    #[error("non-finite adjoint during backward integration at tau = {tau}")]
    NonFiniteAdjoint { tau: f64 },

    #[error("backward root must be scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("variable does not belong to this tape")]
    ForeignVariable,

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("vertex index {index} out of range for {n_vertices} vertices")]
    VertexOutOfRange { index: usize, n_vertices: usize },

    #[error("adjacency matrix is not symmetric at ({0}, {1})")]
    NotSymmetric(usize, usize),

    #[error("anchor {0} is not valid for this archive")]
    InvalidAnchor(usize),

    #[error("missing checkpoint state at tau = {0}")]
    MissingCheckpoint(usize),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
