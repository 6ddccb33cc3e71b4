use std::fmt;

/// Error classes surfaced by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two extents that must agree do not.
    #[error("dimension error on {axis}: {detail}")]
    Dimension { axis: String, detail: String },

    /// A structural parameter (groups, kernel size, budget, scale...) is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// A softmax row with every entry masked out.
    #[error("degenerate row {row}: every entry is masked")]
    DegenerateRow { row: usize },

    /// Misuse of the differentiation API (non-scalar loss, foreign variable).
    #[error("contract error: {0}")]
    Contract(String),

    /// A computation record was used after it was consumed.
    #[error("lifecycle error: {0}")]
    Lifecycle(String),

    /// A function under evaluation produced a non-finite value.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// Malformed binary file.
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    /// Values outside the admissible range.
    #[error("domain error: {0}")]
    Domain(String),

    /// Training produced a non-finite loss.
    #[error("divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(axis: impl fmt::Display, detail: impl Into<String>) -> Self {
        Error::Dimension {
            axis: axis.to_string(),
            detail: detail.into(),
        }
    }

    pub(crate) fn format(offset: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            offset,
            detail: detail.into(),
        }
    }

    /// Short stable tag for the error class, used as a diagnostic prefix.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Config(_) => "config",
            Error::DegenerateRow { .. } => "degenerate-row",
            Error::Contract(_) => "contract",
            Error::Lifecycle(_) => "lifecycle",
            Error::Evaluation(_) => "evaluation",
            Error::Format { .. } => "format",
            Error::Domain(_) => "domain",
            Error::Divergence { .. } => "divergence",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
