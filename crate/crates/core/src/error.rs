use alloc::string::String;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("token id {id} is outside the vocabulary of size {vocab}")]
    Tokenization { id: usize, vocab: usize },
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    /// Short stable identifier, used by the CLI's machine-parsable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Config(_) => "config",
            Error::Validation(_) => "validation",
            Error::Contract(_) => "contract",
            Error::Tokenization { .. } => "tokenization",
            Error::Generation(_) => "generation",
            Error::NonFinite(_) => "non_finite",
        }
    }
}
