use thiserror::Error;

pub type Result<T, E = CerdError> = std::result::Result<T, E>;

/// Every failure mode surfaced by the library.
#[derive(Debug, Error)]
pub enum CerdError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("data integrity error: {0}")]
    DataIntegrity(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("training diverged: non-finite gradient in parameter `{0}`")]
    Divergence(String),

    #[error("compatibility error: {0}")]
    Compatibility(String),

    #[error("internal consistency failure: {0}")]
    Consistency(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CerdError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CerdError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code: 1 usage/configuration, 2 data, 3 internal consistency.
    pub fn exit_code(&self) -> i32 {
        match self {
            CerdError::Parameter(_) | CerdError::Configuration(_) | CerdError::Compatibility(_) => 1,
            CerdError::DataIntegrity(_)
            | CerdError::Alignment(_)
            | CerdError::Label(_)
            | CerdError::Stratification(_)
            | CerdError::Io { .. }
            | CerdError::Json(_)
            | CerdError::Csv(_) => 2,
            CerdError::Dimension(_)
            | CerdError::Contract(_)
            | CerdError::Evaluation(_)
            | CerdError::Divergence(_)
            | CerdError::Consistency(_) => 3,
        }
    }
}
