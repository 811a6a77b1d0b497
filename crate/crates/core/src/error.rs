use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index out of range: {what} {index} (limit {limit})")]
    Index {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("supervision labels: {0}")]
    Labels(String),

    #[error("vocabulary mismatch: {0}")]
    Vocabulary(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),

    #[error("invalid bag {image_id}: {violations:?}")]
    InvalidBag {
        image_id: String,
        violations: Vec<String>,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint checksum mismatch: {0}")]
    Checksum(String),

    #[error("unknown factor '{name}'; nearest: {suggestions:?}")]
    UnknownFactor {
        name: String,
        suggestions: Vec<String>,
    },

    #[error("query: {0}")]
    Query(String),

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short code used by the command line front end.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "E_DIMENSION",
            Error::Index { .. } => "E_INDEX",
            Error::Config(_) => "E_CONFIG",
            Error::Labels(_) => "E_LABELS",
            Error::Vocabulary(_) => "E_VOCABULARY",
            Error::Empty(_) => "E_EMPTY",
            Error::NotPositiveDefinite(_) => "E_NOT_PD",
            Error::InvalidBag { .. } => "E_INVALID_BAG",
            Error::Parse { .. } => "E_PARSE",
            Error::Version { .. } => "E_VERSION",
            Error::Checksum(_) => "E_CHECKSUM",
            Error::UnknownFactor { .. } => "E_UNKNOWN_FACTOR",
            Error::Query(_) => "E_QUERY",
            Error::Evaluation(_) => "E_EVALUATION",
            Error::Io(_) => "E_IO",
            Error::Json(_) => "E_JSON",
        }
    }
}
