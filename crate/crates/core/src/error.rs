use thiserror::Error;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LabError {
    /// A caller broke a documented precondition (shapes, ranges, stale state).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("matrix is not positive definite: pivot {pivot} has value {value:e}")]
    Singular { pivot: usize, value: f64 },

    #[error(
        "orthogonal step requires at least two experts; set omoe.enabled=false or use M >= 2"
    )]
    SingleExpert,

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("load error at row {row}, column {column}: {message}")]
    Load {
        row: usize,
        column: String,
        message: String,
    },

    #[error("{0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LabError {
    pub fn contract(msg: impl Into<String>) -> Self {
        Self::Contract(msg.into())
    }

    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable tag used in CLI error objects.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Contract(_) => "contract",
            Self::Singular { .. } => "singular",
            Self::SingleExpert => "single_expert",
            Self::Config { .. } => "config",
            Self::Load { .. } => "load",
            Self::Data(_) => "data",
            Self::Checkpoint(_) => "checkpoint",
            Self::Io(_) => "io",
            Self::Json(_) => "json",
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self, Self::Config { .. })
    }
}
