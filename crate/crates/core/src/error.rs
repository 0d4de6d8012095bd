use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite values: {0}")]
    Numerics(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("allocation budget exceeded: {needed} bytes requested, budget {budget}")]
    Budget { needed: usize, budget: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "ShapeError",
            Error::Contract(_) => "ContractError",
            Error::InvalidPartition(_) => "InvalidPartition",
            Error::Config(_) => "ConfigError",
            Error::Numerics(_) => "NumericsError",
            Error::Format(_) => "FormatError",
            Error::Budget { .. } => "BudgetError",
            Error::Io(_) => "IoError",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
