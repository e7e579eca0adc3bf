//! Chance-constraint surrogates.
//!
//! Convention: `beta` is the *satisfaction* probability of the joint
//! constraint `P[x ∈ X] ≥ beta`; `eps_i` is the violation budget of row `i`
//! after the Boole split, with `Σ eps_i = 1 − beta`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pce::PceVector;

/// `{x : G x ≤ bounds}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polytope {
    pub g: DMatrix<f64>,
    pub bounds: DVector<f64>,
}

impl Polytope {
    pub fn new(g: DMatrix<f64>, bounds: DVector<f64>) -> Result<Self> {
        if g.nrows() != bounds.len() {
            return Err(Error::DimensionMismatch {
                what: "polytope bounds",
                expected: g.nrows(),
                found: bounds.len(),
            });
        }
        if let Some(i) = g.row_iter().position(|r| r.iter().all(|v| *v == 0.0)) {
            return Err(Error::InvalidArgument(format!("polytope row {i} is all zeros")));
        }
        Ok(Self { g, bounds })
    }

    pub fn n_rows(&self) -> usize {
        self.g.nrows()
    }

    pub fn n_x(&self) -> usize {
        self.g.ncols()
    }

    /// `max_j (g_jᵀx − d_j)`.
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        (&self.g * x - &self.bounds).max()
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.max_violation(x) <= 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChanceSpec {
    pub beta: f64,
    pub allocation: Vec<f64>,
}

impl ChanceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::InvalidArgument(format!("beta = {} not in (0, 1)", self.beta)));
        }
        if self.allocation.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::InvalidArgument("violation budgets must be positive".into()));
        }
        let total: f64 = self.allocation.iter().sum();
        if (total - (1.0 - self.beta)).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "violation budgets sum to {total}, expected {}",
                1.0 - self.beta
            )));
        }
        Ok(())
    }
}

/// Uniform Boole split: `eps_i = (1 − beta) / n_c`.
pub fn boole_allocate(beta: f64, n_c: usize) -> Result<ChanceSpec> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidArgument(format!("beta = {beta} not in (0, 1)")));
    }
    if n_c == 0 {
        return Err(Error::InvalidArgument("need at least one constraint row".into()));
    }
    Ok(ChanceSpec {
        beta,
        allocation: vec![(1.0 - beta) / n_c as f64; n_c],
    })
}

/// `sqrt((1 − eps) / eps)`, the Cantelli tightening factor.
pub fn cantelli_factor(eps: f64) -> f64 {
    ((1.0 - eps) / eps).sqrt()
}

/// `mean_g + sqrt((1 − eps)/eps) · std_g`; the constraint `P[g ≤ 0] ≥ 1 − eps`
/// holds for every distribution with these two moments iff this is `≤ 0`.
pub fn cantelli_residual(mean_g: f64, std_g: f64, eps: f64) -> f64 {
    mean_g + cantelli_factor(eps) * std_g
}

/// Mean and standard deviation of `aᵀx + b` for a PCE state.
pub fn pce_halfspace_moments(x: &PceVector, a: &DVector<f64>, b: f64) -> Result<(f64, f64)> {
    if a.len() != x.n_out() {
        return Err(Error::DimensionMismatch {
            what: "half-space normal",
            expected: x.n_out(),
            found: a.len(),
        });
    }
    let proj = a.transpose() * x.coeffs();
    let mean = proj[0] + b;
    let std = proj.iter().skip(1).map(|v| v * v).sum::<f64>().sqrt();
    Ok((mean, std))
}

/// Fraction of samples with `max_j (g_jᵀx − d_j) ≤ 0`.
pub fn saa_joint_probability(samples: &[DVector<f64>], poly: &Polytope) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let inside = samples.iter().filter(|x| poly.contains(x)).count();
    Ok(inside as f64 / samples.len() as f64)
}

/// Default ellipsoid radius from the multivariate Chebyshev bound.
pub fn default_ellipsoid_radius(n_x: usize, beta: f64) -> f64 {
    (n_x as f64 / (1.0 - beta)).sqrt()
}

/// Whether `mean ⊕ {x : xᵀΣ⁻¹x ≤ r²}` lies inside the polytope, checked row
/// by row as `g_jᵀμ + r·sqrt(g_jᵀΣg_j) ≤ d_j`.
pub fn ellipsoid_inclusion(mean: &DVector<f64>, cov: &DMatrix<f64>, r: f64, poly: &Polytope) -> Result<bool> {
    if !(r >= 0.0) {
        return Err(Error::InvalidArgument(format!("radius {r} must be nonnegative")));
    }
    if cov.nrows() != mean.len() || cov.ncols() != mean.len() || poly.n_x() != mean.len() {
        return Err(Error::DimensionMismatch {
            what: "ellipsoid",
            expected: poly.n_x(),
            found: mean.len(),
        });
    }
    let asym = (cov - cov.transpose()).amax();
    let scale = cov.amax().max(1.0);
    if asym > 1e-12 * scale {
        return Err(Error::InvalidArgument("covariance is not symmetric".into()));
    }
    let min_eig = cov.clone().symmetric_eigen().eigenvalues.min();
    if min_eig < -1e-12 * scale {
        return Err(Error::NotPositiveSemidefinite {
            min_eigenvalue: min_eig,
        });
    }
    Ok(poly.g.row_iter().zip(poly.bounds.iter()).all(|(g, d)| {
        let g = g.transpose();
        let spread = (g.transpose() * cov * &g)[0].max(0.0).sqrt();
        (g.dot(mean) + r * spread) <= *d
    }))
}
