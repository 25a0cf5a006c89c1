use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid DAG: {0}")]
    InvalidDag(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no model for node `{0}`")]
    MissingModel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("arithmetic overflow: {0}")]
    Overflow(String),

    #[error("need at least {needed} samples, got {got}{context}")]
    TooFewSamples {
        needed: usize,
        got: usize,
        context: String,
    },

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("node `{node}` is memory-bound: allocate more memory and retrain")]
    MemoryBound { node: String },

    #[error("metrics input rejected: {malformed} of {total} lines malformed")]
    TooManyMalformed { malformed: usize, total: usize },

    #[error("linear program is infeasible: {0}")]
    Infeasible(String),

    #[error("linear program is unbounded")]
    Unbounded,

    #[error("simplex did not converge after {0} pivots")]
    IterationLimit(usize),

    #[error("allocation infeasible: {0}")]
    Allocation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn too_few(needed: usize, got: usize, context: impl Into<String>) -> Self {
        let context = context.into();
        Error::TooFewSamples {
            needed,
            got,
            context: if context.is_empty() {
                context
            } else {
                format!(" ({context})")
            },
        }
    }
}
