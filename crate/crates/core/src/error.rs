use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node}: {detail}")]
    Shape { node: usize, detail: String },

    #[error("shape mismatch: {0}")]
    Dims(String),

    #[error("input node {0} is a placeholder and was not bound")]
    Unbound(usize),

    #[error("node {0} is not a leaf")]
    NotALeaf(usize),

    #[error("illegal Jacobian override on node {node}: {detail}")]
    Override { node: usize, detail: String },

    #[error("output node {0} is not scalar and no seed cotangent was given")]
    NonScalarOutput(usize),

    #[error("aggregator {kind} needs an even input width, got {width}")]
    OddWidth { kind: &'static str, width: usize },

    #[error("aggregator read before any step was folded")]
    EmptyAggregate,

    #[error("variance must be positive, got {0}")]
    NonPositiveVariance(f64),

    #[error("unknown {what} `{name}`")]
    Unknown { what: &'static str, name: String },

    #[error("action {action} out of range for {n} actions")]
    InvalidAction { action: usize, n: usize },

    #[error("posterior undefined: every task assigns zero likelihood")]
    UndefinedPosterior,

    #[error("invalid task set: {0}")]
    InvalidTaskSet(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("non-finite {what} at update {update}")]
    NonFinite { what: String, update: usize },

    #[error("optimum not available for {0}")]
    NoOptimum(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
