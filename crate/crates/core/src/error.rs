use thiserror::Error;

/// Failures surfaced by the solvers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),
    #[error("invalid coefficient: {0}")]
    InvalidCoefficient(String),
    #[error("ill-posed discretisation: {what} (offending value {value:e})")]
    IllPosed { what: String, value: f64 },
    #[error("degenerate constrained subspace: {0}")]
    DegenerateSubspace(String),
    #[error("linear algebra failure: {0}")]
    Linalg(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<ndarray_linalg::error::LinalgError> for Error {
    fn from(e: ndarray_linalg::error::LinalgError) -> Self {
        Error::Linalg(e.to_string())
    }
}
