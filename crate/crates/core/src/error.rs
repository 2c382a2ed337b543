use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's preconditions (shapes, lengths, indices).
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// Input outside an operation's mathematical domain.
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("graph is not acyclic: {0}")]
    Acyclic(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// NaN/Inf surfaced during training or inference.
    #[error("numerical fault: {0}")]
    Numerical(String),

    #[error("matrix `{matrix}` is not symmetric positive definite")]
    NotPositiveDefinite { matrix: &'static str },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Contract {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Domain {
        op,
        detail: detail.into(),
    }
}
