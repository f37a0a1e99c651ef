use thiserror::Error;

pub type Result<T> = std::result::Result<T, SemiError>;

#[derive(Debug, Error)]
pub enum SemiError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("input out of domain: {0}")]
    InputDomain(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("training diverged at step {step}")]
    Diverged {
        step: usize,
        last_good: Box<crate::numerics::Params>,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl SemiError {
    /// Process exit code: 1 for configuration problems, 2 for numeric or
    /// training failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            SemiError::Numeric(_)
            | SemiError::Training(_)
            | SemiError::Generation(_)
            | SemiError::Diverged { .. } => 2,
            _ => 1,
        }
    }
}
