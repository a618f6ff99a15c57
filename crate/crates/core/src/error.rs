use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("position {0:?} lies outside the grid bounding box")]
    OutOfBounds([f64; 3]),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("zero-norm vector in cosine distance")]
    DegenerateVector,

    #[error("query pixel ({x}, {y}) has a zero-norm feature")]
    DegenerateQuery { x: usize, y: usize },

    #[error("no style candidates to match against")]
    EmptyCandidates,

    #[error("render aux is stale: built for grid version {aux}, grid is at {grid}")]
    StaleAux { aux: u64, grid: u64 },

    #[error("cached content features no longer match the ground-truth image of view {0}")]
    StaleFeatures(usize),

    #[error("missing precomputed feature for key {0:?}")]
    MissingFeature(String),

    #[error("extractor {0} is not differentiable")]
    NotDifferentiable(&'static str),

    #[error("label {0} has no task binding")]
    UnboundLabel(u32),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }
}
