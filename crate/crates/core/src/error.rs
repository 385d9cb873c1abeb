use thiserror::Error;

/// Crate-wide error type.
///
/// Variants map one-to-one onto the failure classes of the pipeline
/// stages; messages carry enough context to be printed verbatim by the
/// CLI.
#[derive(Debug, Error)]
pub enum Error {
    /// A document does not conform to the canonical CPG schema. Names
    /// the offending field.
    #[error("parse error in field `{field}`: {message}")]
    Parse { field: String, message: String },

    /// A structurally broken graph: dangling edge endpoints, duplicate
    /// node ids, duplicate edge triples.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A source statement could not be matched to any graph node.
    #[error("mapping error: no node candidate for statement(s): {0:?}")]
    Mapping(Vec<String>),

    /// An embedding provider failed or was misconfigured.
    #[error("provider error ({provider}): {message}")]
    Provider { provider: String, message: String },

    /// Matrix or vector dimensions do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Distillation structures that cannot be compared (different
    /// node, different neighborhood shape).
    #[error("alignment error: {0}")]
    Alignment(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Unusable corpus (empty split, unreadable file, bad record).
    #[error("data error: {0}")]
    Data(String),

    /// Training produced a non-finite loss value.
    #[error("divergence error: {0}")]
    Divergence(String),

    /// An input was refused by a guard (e.g. node count over limit).
    #[error("rejected input: {0}")]
    RejectedInput(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for a schema violation tied to a named field.
    pub fn parse(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Shorthand for a provider failure.
    pub fn provider(provider: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Provider {
            provider: provider.into(),
            message: message.into(),
        }
    }
}
