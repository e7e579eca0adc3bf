use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("measure `{0}` has no closed-form recurrence; use stieltjes_family")]
    UnsupportedMeasure(String),

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("density integrates to {integral} on its support (expected 1 within 1e-8)")]
    NonNormalizedDensity { integral: f64 },

    #[error("degenerate measure: norm of degree-{degree} polynomial is {norm:e}")]
    DegenerateMeasure { degree: usize, norm: f64 },

    #[error("degree {degree} out of range (family built to degree {max})")]
    DegreeOutOfRange { degree: usize, max: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("basis with {n_germ} germ dimensions and degree {degree} is too large")]
    BasisSize { n_germ: usize, degree: usize },

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("monomial of degree {degree} cannot be represented exactly in a degree-{cap} basis")]
    ExactnessExceeded { degree: usize, cap: usize },

    #[error("quadrature exact to degree {available} but degree {required} is required")]
    InsufficientQuadrature { required: usize, available: usize },

    #[error("operands are expanded over different bases")]
    BasisMismatch,

    #[error("design matrix has rank {rank}, {required} required")]
    RankDeficient { rank: usize, required: usize },

    #[error("state diverged (non-finite) at t = {time}")]
    Divergence { time: f64 },

    #[error("covariance matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveSemidefinite { min_eigenvalue: f64 },

    #[error("Riccati iteration did not converge after {iterations} iterations; pair not stabilizable")]
    NotStabilizable { iterations: usize },

    #[error("all likelihood weights below 1e-300; measurement inconsistent with prior support")]
    LikelihoodCollapse,

    #[error("surrogate infeasible at the initial step ({0})")]
    InfeasibleAtStart(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("serialization: {0}")]
    Serialization(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
