use thiserror::Error;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation in {op}: {detail}")]
    Shape { op: String, detail: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid search space: {0}")]
    Space(String),

    #[error("budget infeasible: {0}")]
    Budget(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("aggregation error (client {client}): {detail}")]
    Aggregation { client: usize, detail: String },

    #[error("round aborted: {0}")]
    Round(String),

    #[error("search error: {0}")]
    Search(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            op: op.into(),
            detail: detail.into(),
        }
    }
}
