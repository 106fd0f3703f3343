use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported modulation scheme `{0}`")]
    UnsupportedModulation(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid counts: {0}")]
    InvalidCounts(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("not enough trusted samples for classes: {}", .classes.join(", "))]
    InsufficientTrusted { classes: Vec<String> },

    #[error("flip pair ({a}, {b}) is invalid for {n_classes} classes")]
    InvalidPair { a: usize, b: usize, n_classes: usize },

    #[error("transition row {0} is undefined: class absent from true labels")]
    UndefinedRow(usize),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("cosine similarity of a zero vector")]
    DegenerateVector,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("an episode needs at least two classes")]
    NeedTwoClasses,

    #[error("class {0} has no support samples")]
    MissingClass(usize),

    #[error("prototype bank has not been initialized yet")]
    NotWarmedUp,

    #[error("unknown sample id {0}")]
    UnknownSample(u64),

    #[error("segmentation infeasible: {0}")]
    Segmentation(String),

    #[error("evaluation split is empty")]
    EmptySplit,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::UnsupportedModulation(_)
                | Error::InvalidArgument(_)
                | Error::InvalidCounts(_)
                | Error::InsufficientTrusted { .. }
                | Error::InvalidPair { .. }
                | Error::Config(_)
        )
    }
}
