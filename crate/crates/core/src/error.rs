use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value violates a structural invariant; `field` names the offending input.
    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },

    #[error("infeasible allocation: {0}")]
    Feasibility(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Inputs were produced from a different model spec or dataset than the ones supplied.
    #[error("stale artifact: {0}")]
    Staleness(String),

    #[error("logit cache does not cover {0}")]
    Coverage(String),

    /// Enumeration would exceed the caller's limit. `count` is exact unless `lower_bound` is set.
    #[error("feasible set has {}{count} allocations, over the limit of {limit}", if *.lower_bound { "at least " } else { "" })]
    Size {
        count: u128,
        lower_bound: bool,
        limit: usize,
    },

    #[error("level-switch mutation needs at least two layers, got {0}")]
    Structure(usize),

    #[error("proposal probability is zero for token {0}")]
    UndefinedProposal(usize),

    #[error("line {line}: {source}")]
    AtLine { line: usize, source: Box<Error> },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Coarse error classes, used by the command line to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Staleness,
    Size,
    Io,
}

impl Error {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::AtLine { source, .. } => source.kind(),
            Error::Staleness(_) | Error::Coverage(_) => ErrorKind::Staleness,
            Error::Size { .. } => ErrorKind::Size,
            Error::Io { .. } => ErrorKind::Io,
            _ => ErrorKind::Validation,
        }
    }
}
