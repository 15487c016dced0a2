use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("forest generation failed: {0}")]
    Generation(String),

    #[error("no route: open set exhausted after {expansions} expansions")]
    NoRoute { expansions: usize },

    #[error("search budget exceeded after {expansions} expansions")]
    Timeout { expansions: usize },

    #[error("planner fault: {0}")]
    PlannerFault(String),

    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error("ill-conditioned kernel matrix: {0}")]
    IllConditioned(String),

    #[error("solver fault: {0}")]
    SolverFault(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
