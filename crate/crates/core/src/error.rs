use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("schema conflict: feature `{name}` is {left} in one schema and {right} in the other")]
    SchemaConflict {
        name: String,
        left: String,
        right: String,
    },

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("shift validation error: {0}")]
    ShiftValidation(String),

    #[error("non-finite loss in {phase} at epoch {epoch}, batch {batch} (batch seed {batch_seed})")]
    NonFiniteLoss {
        phase: String,
        epoch: usize,
        batch: usize,
        batch_seed: u64,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("drift diagnostic error: {0}")]
    Diagnostic(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("empty selection: {message}; available: {available}")]
    EmptySelection { message: String, available: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
