use std::path::PathBuf;

/// Errors raised across the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("failed to parse {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("corpus contains no documents")]
    EmptyCorpus,
    #[error("infeasible synthetic configuration: {0}")]
    InfeasibleConfig(String),
    #[error("class split infeasible: {0}")]
    SplitInfeasible(String),
    #[error("class pool too small: need {needed} classes with candidates, have {available}")]
    ClassPoolTooSmall { needed: usize, available: usize },
    #[error("task infeasible: {0}")]
    TaskInfeasible(String),
    #[error("meta dataset infeasible: {0}")]
    DatasetInfeasible(String),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("token id {token_id} out of vocabulary (size {vocab_size})")]
    TokenOutOfVocab { token_id: u32, vocab_size: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("class {0} has no unmasked support tokens")]
    EmptyClass(usize),
    #[error("no unmasked out-of-task support tokens")]
    NoOtdTokens,
    #[error("classification with the out-of-task prototype requested, but none was computed")]
    MissingOtdPrototype,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("matrix is not positive definite")]
    NonPsd,
    #[error("scores contain a single class; AUROC undefined")]
    SingleClass,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("missing input {path}: {hint}")]
    MissingInput { path: PathBuf, hint: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
