use thiserror::Error;

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("replay of step {step} does not reproduce the recorded checkpoint")]
    ReplayMismatch { step: usize },

    #[error("step {step} out of range 1..={steps}")]
    StepOutOfRange { step: usize, steps: usize },

    #[error("canary set has no IN/OUT assignment")]
    MissingAssignment,

    #[error("canary assignment does not match the training tape: {0}")]
    TapeMismatch(String),

    #[error("guess budget {budget} exceeds {available} available")]
    BudgetExceeded { budget: usize, available: usize },

    #[error("malformed {what} at byte offset {offset}: {reason}")]
    Malformed {
        what: &'static str,
        offset: u64,
        reason: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = AuditError> = std::result::Result<T, E>;

pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> AuditError {
    AuditError::Invalid {
        what,
        reason: reason.into(),
    }
}
