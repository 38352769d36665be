use thiserror::Error;

/// Errors raised by the laboratory.
///
/// Variants split into two families: validation problems (bad input,
/// inconsistent configuration) and numerical failures (a solver did not
/// converge, a state became non-finite). The CLI maps them onto distinct
/// exit codes via [`Error::is_validation`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid field: {0}")]
    InvalidField(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("boundary guard violated: {0}")]
    BoundaryGuard(String),
    #[error("shooting bracket not found: {0}")]
    BracketNotFound(String),
    #[error("Newton iteration diverged: {0}")]
    NewtonDivergence(String),
    #[error("eigensolver: {0}")]
    Eigen(String),
    #[error("kernel asymmetry {0:e} above tolerance")]
    Asymmetry(f64),
    #[error("quadratic form {0:e} is negative beyond tolerance; orthogonality to the ground mode is broken")]
    Orthogonality(f64),
    #[error("non-finite state at t = {0}")]
    NonFinite(f64),
    #[error("bisection: {0}")]
    Bisection(String),
    #[error("root find: {0}")]
    RootFind(String),
    #[error("no exit episode: {0}")]
    NoEpisode(String),
    #[error("threshold construction: {0}")]
    Threshold(String),
    #[error("cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for input/configuration problems, false for numerical failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::GridMismatch(_)
                | Error::InvalidGrid(_)
                | Error::InvalidField(_)
                | Error::InvalidParams(_)
                | Error::BoundaryGuard(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
