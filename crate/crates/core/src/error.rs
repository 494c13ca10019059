use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{what} index {index} out of range (bound {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGrad(String),
    #[error("non-finite loss in batch sample {sample} (worst physical position {position})")]
    NonFiniteLoss { sample: usize, position: usize },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("reserved token id {token} at position {position}")]
    ReservedToken { token: u32, position: usize },
    #[error("mask token at position {0} cannot be decoded")]
    MaskInOutput(usize),
    #[error("{0}")]
    Invalid(String),
}
