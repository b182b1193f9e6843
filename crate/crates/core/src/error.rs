use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("utterance does not parse: unexpected {found} at token {position}")]
    Unparseable { position: usize, found: String },

    #[error("utterance parses but denotes no valid trajectory")]
    NoTrajectory,

    #[error("trajectory has {segments} segments but the language allows at most {max}")]
    TrajectoryTooLong { segments: usize, max: usize },

    #[error("operation requires {0}")]
    UnsupportedLanguage(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("index {index} out of range for length {len}")]
    OutOfRange { index: usize, len: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("generation {generation}: {source}")]
    Generation {
        generation: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
