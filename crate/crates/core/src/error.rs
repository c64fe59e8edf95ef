use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("quadrature did not converge: {0}")]
    Quadrature(String),
    #[error("physicality violated at omega = {omega} rad/s (margin {margin})")]
    Physicality { omega: f64, margin: f64 },
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("ill-conditioned: {0}")]
    IllConditioned(String),
    #[error("missing: {0}")]
    Missing(String),
    #[error("empty main frequency support")]
    EmptySupport,
}

pub type Result<T> = std::result::Result<T, Error>;
