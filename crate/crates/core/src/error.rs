use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("corpus files are misaligned: {src} source lines vs {trg} target lines")]
    Misaligned { src: usize, trg: usize },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("checkpoint does not match the model configuration: {0}")]
    ShapeMismatch(String),

    #[error("decode prefix of {len} tokens exceeds maximum length {max}")]
    PrefixTooLong { len: usize, max: usize },

    #[error("batch contains no target tokens")]
    EmptyBatch,

    #[error("non-finite training loss at step {step}: {dump}")]
    NonFiniteLoss { step: u64, dump: String },

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("oracle timed out with {pending} sentences still pending")]
    OracleTimeout { pending: usize },

    #[error("journal error: {0}")]
    Journal(String),

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
