use thiserror::Error;

/// Errors raised while building graphs or running inference.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("parameter outside family domain: {0}")]
    Domain(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("value outside support: {0}")]
    Support(String),
    #[error("parent slot mismatch: {0}")]
    SlotMismatch(String),
    #[error("plate mismatch: {a:?} vs {b:?}")]
    PlateMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error("cycle: {0}")]
    Cycle(String),
    #[error("cluster plate has size {found}, gate has {expected} categories")]
    ClusterSizeMismatch { expected: usize, found: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("unknown node id {0}")]
    UnknownNode(usize),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;
