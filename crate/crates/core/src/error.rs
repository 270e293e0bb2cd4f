use thiserror::Error;

/// Errors raised across corpus generation, training and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is outside its allowed range.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("masking error: {0}")]
    Masking(String),

    /// Tensor or parameter shapes disagree.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A loss or intermediate value became NaN/Inf or degenerate.
    #[error("numeric error in {component}: {message}")]
    Numeric { component: String, message: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("lifecycle error: {0}")]
    Lifecycle(String),

    #[error("negative sampling error: {0}")]
    NegativeSampling(String),

    /// Evaluation inputs violate the retrieval protocol (e.g. a query without relevant images).
    #[error("evaluation protocol error: {0}")]
    Protocol(String),

    /// Corpus or checkpoint files are malformed.
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn numeric(component: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Numeric {
            component: component.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Vocabulary(_) => "vocabulary",
            Error::Masking(_) => "masking",
            Error::Dimension(_) => "dimension",
            Error::Numeric { .. } => "numeric",
            Error::Contract(_) => "contract",
            Error::Lifecycle(_) => "lifecycle",
            Error::NegativeSampling(_) => "negative_sampling",
            Error::Protocol(_) => "protocol",
            Error::Data(_) => "data",
            Error::Io(_) => "io",
            Error::Tensor(_) => "tensor",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
