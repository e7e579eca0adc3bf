//! Polynomial chaos toolkit and chance-constrained stochastic MPC.
//!
//! The crate is organized bottom-up:
//!
//! - [`orthopoly`]: univariate orthonormal families, Gauss rules.
//! - [`multibasis`]: total-degree multivariate bases and triple-product tensors.
//! - [`pce`]: coefficient containers, Galerkin arithmetic, projection, moments.
//! - [`propagate`]: Galerkin-expanded linear dynamics, the coefficient ODE,
//!   and the seeded Monte Carlo oracle.
//! - [`chance`]: Cantelli surrogates and empirical chance-constraint checks.
//! - [`smpc`]: surrogate cone program, operator-splitting solver, LQR and the
//!   receding-horizon loop.
//! - [`estimate`]: moment-matching Bayesian update of a parameter PCE.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN. Index
// loops mirror the matrix formulas they implement.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod chance;
pub mod error;
pub mod estimate;
mod linalg;
pub mod multibasis;
pub mod orthopoly;
pub mod pce;
pub mod propagate;
pub mod smpc;

pub use error::{Error, Result};
pub use multibasis::{MultiIndex, TensorRule, TotalDegreeBasis, TripleProductTensor};
pub use orthopoly::{MeasureDescriptor, PolynomialFamily, QuadratureRule};
pub use pce::PceVector;
