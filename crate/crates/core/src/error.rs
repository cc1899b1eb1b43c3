use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    /// A type invariant does not hold for the supplied input.
    #[error("invariant violated: {invariant}: {detail}")]
    Invariant {
        invariant: &'static str,
        detail: String,
    },

    /// Success mass sits on a state the behavior marginal never visits.
    #[error("success mass on unvisited state {state}: behavior marginal is zero there")]
    UnvisitedSuccessState { state: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("zero mass: {0}")]
    ZeroMass(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("iteration cap of {cap} reached with residual {residual:e}")]
    IterationCap { cap: usize, residual: f64 },

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LabError {
    pub(crate) fn invariant(invariant: &'static str, detail: impl Into<String>) -> Self {
        LabError::Invariant {
            invariant,
            detail: detail.into(),
        }
    }

    /// True for errors caused by inputs that break a declared invariant
    /// (as opposed to I/O or configuration problems).
    pub fn is_input_violation(&self) -> bool {
        matches!(
            self,
            LabError::Invariant { .. }
                | LabError::UnvisitedSuccessState { .. }
                | LabError::Dimension(_)
                | LabError::ZeroMass(_)
                | LabError::Empty(_)
                | LabError::MissingInput(_)
        )
    }
}
