use rce_core::LabError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Bad command line or configuration syntax.
    #[error("usage: {0}")]
    Usage(String),

    /// An input file or value breaks a declared invariant.
    #[error("invariant violated: {invariant}: {detail}")]
    Input { invariant: String, detail: String },

    #[error(transparent)]
    Core(#[from] LabError),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    /// A verification suite or acceptance check did not pass.
    #[error("check failed: {0}")]
    Failed(String),
}

impl HarnessError {
    pub fn input(invariant: impl Into<String>, detail: impl Into<String>) -> Self {
        HarnessError::Input {
            invariant: invariant.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) => 2,
            HarnessError::Input { .. } | HarnessError::Json { .. } => 3,
            HarnessError::Core(e) if e.is_input_violation() => 3,
            _ => 1,
        }
    }
}
