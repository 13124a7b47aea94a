use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// The two largest eigenvalues of the quaternion moment matrix coincide.
    #[error("ambiguous quaternion average: top eigenvalue gap {gap:e} is within tolerance")]
    AmbiguousAverage { gap: f64 },

    #[error("model load error in field `{field}`: {message}")]
    ModelLoad {
        field: &'static str,
        message: String,
    },

    #[error("center update failed for cluster {cluster}, joint {joint}: {source}")]
    CenterUpdate {
        cluster: usize,
        joint: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("clustering failed at iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("memory row {row} is not a valid body configuration: {source}")]
    MemoryRow {
        row: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("degenerate prototype selection: {0}")]
    DegenerateSelection(String),

    #[error("fit diverged after {} evaluations: non-finite loss", trace.len())]
    FitDiverged { trace: Vec<f64> },

    #[error("alignment failed: {0}")]
    Alignment(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical routines themselves, as opposed to
    /// malformed input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Degenerate(_)
            | Error::AmbiguousAverage { .. }
            | Error::CenterUpdate { .. }
            | Error::DegenerateSelection(_)
            | Error::FitDiverged { .. }
            | Error::Alignment(_) => true,
            Error::Iteration { source, .. } | Error::MemoryRow { source, .. } => {
                source.is_numerical()
            }
            _ => false,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
