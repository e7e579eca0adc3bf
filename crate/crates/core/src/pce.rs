//! PCE coefficient matrices and the operations on them.
//!
//! A [`PceVector`] stores `V ∈ R^{n_out × (L+1)}` so that the expansion is
//! `ŷ(ξ) = V Φ(ξ)`. The basis is orthonormal, so mean and second moment are
//! read off the coefficients directly.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multibasis::{TensorRule, TotalDegreeBasis, TripleProductTensor};

#[derive(Debug, Clone, PartialEq)]
pub struct PceVector {
    coeffs: DMatrix<f64>,
    basis: Arc<TotalDegreeBasis>,
}

impl PceVector {
    pub fn new(basis: Arc<TotalDegreeBasis>, coeffs: DMatrix<f64>) -> Result<Self> {
        if coeffs.ncols() != basis.len() {
            return Err(Error::DimensionMismatch {
                what: "PCE coefficient columns",
                expected: basis.len(),
                found: coeffs.ncols(),
            });
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Numerical("non-finite PCE coefficient".into()));
        }
        Ok(PceVector { coeffs, basis })
    }

    pub fn zeros(basis: Arc<TotalDegreeBasis>, n_out: usize) -> Self {
        let coeffs = DMatrix::zeros(n_out, basis.len());
        PceVector { coeffs, basis }
    }

    /// Deterministic quantity: only the constant coefficient is set.
    pub fn constant(basis: Arc<TotalDegreeBasis>, values: &[f64]) -> Self {
        let mut p = Self::zeros(basis, values.len());
        for (r, v) in values.iter().enumerate() {
            p.coeffs[(r, 0)] = *v;
        }
        p
    }

    /// The physical parameter of germ component `dim`, i.e. the affine image
    /// `offset + scale·ξ_dim` of its measure, as a one-row expansion.
    pub fn parameter(basis: Arc<TotalDegreeBasis>, dim: usize) -> Result<Self> {
        let fam = basis.families().get(dim).ok_or(Error::DimensionMismatch {
            what: "germ component",
            expected: basis.n_germ(),
            found: dim,
        })?;
        let (offset, scale) = fam.measure.germ_affine();
        let mut p = Self::zeros(basis.clone(), 1);
        // ξ = h_1 φ_1 + a_0 φ_0
        p.coeffs[(0, 0)] = offset + scale * fam.recur_a[0];
        if let Some(pos) = basis.linear_position(dim) {
            p.coeffs[(0, pos)] = scale * fam.norms[1.min(fam.max_degree)];
        }
        Ok(p)
    }

    pub fn coeffs(&self) -> &DMatrix<f64> {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.coeffs
    }

    pub fn basis(&self) -> &Arc<TotalDegreeBasis> {
        &self.basis
    }

    pub fn n_out(&self) -> usize {
        self.coeffs.nrows()
    }

    pub fn n_basis(&self) -> usize {
        self.coeffs.ncols()
    }

    pub fn row(&self, r: usize) -> PceVector {
        PceVector {
            coeffs: self.coeffs.rows(r, 1).into_owned(),
            basis: self.basis.clone(),
        }
    }

    /// `μ₁ = v₀`.
    pub fn mean(&self) -> DVector<f64> {
        self.coeffs.column(0).into_owned()
    }

    /// `Σ_{ℓ≥1} v_ℓ²` per row.
    pub fn variance(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.n_out(),
            self.coeffs
                .row_iter()
                .map(|r| r.iter().skip(1).map(|v| v * v).sum::<f64>()),
        )
    }

    /// Raw second moment `Σ_ℓ v_ℓ²` (includes `v₀²`).
    pub fn second_moment(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.n_out(),
            self.coeffs.row_iter().map(|r| r.iter().map(|v| v * v).sum::<f64>()),
        )
    }

    /// `Σ_{ℓ≥1} v_ℓ v_ℓᵀ`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let tail = self.coeffs.columns(1, self.n_basis() - 1);
        tail * tail.transpose()
    }

    /// `E[ŷ^m]` per row by quadrature; the rule must be exact to degree `m·d`.
    pub fn raw_moment(&self, m: usize, rule: &TensorRule) -> Result<DVector<f64>> {
        if m == 0 {
            return Err(Error::InvalidArgument("moment order must be ≥ 1".into()));
        }
        let required = m * self.basis.degree();
        if rule.exact_degree < required {
            return Err(Error::InsufficientQuadrature {
                required,
                available: rule.exact_degree,
            });
        }
        let mut acc = DVector::zeros(self.n_out());
        for (p, w) in rule.points.iter().zip(&rule.weights) {
            let y = self.sample_eval(p)?;
            acc += y.map(|v| w * v.powi(m as i32));
        }
        Ok(acc)
    }

    /// `V Φ(ξ)`.
    pub fn sample_eval(&self, xi: &[f64]) -> Result<DVector<f64>> {
        let phi = DVector::from_vec(self.basis.eval(xi)?);
        Ok(&self.coeffs * phi)
    }

    /// Evaluation with a precomputed `Φ(ξ)`.
    pub fn eval_with(&self, phi: &DVector<f64>) -> DVector<f64> {
        &self.coeffs * phi
    }

    pub fn same_basis(&self, other: &PceVector) -> bool {
        Arc::ptr_eq(&self.basis, &other.basis) || self.basis.compatible(&other.basis)
    }

    pub fn to_record(&self) -> PceRecord {
        PceRecord {
            basis_id: self.basis.id(),
            n_out: self.n_out(),
            n_basis: self.n_basis(),
            coefficients: self.coeffs.transpose().iter().copied().collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_record())?)
    }

    pub fn from_record(basis: Arc<TotalDegreeBasis>, rec: &PceRecord) -> Result<Self> {
        if rec.basis_id != basis.id() {
            return Err(Error::BasisMismatch);
        }
        if rec.n_basis != basis.len() || rec.coefficients.len() != rec.n_out * rec.n_basis {
            return Err(Error::DimensionMismatch {
                what: "serialized coefficients",
                expected: rec.n_out * basis.len(),
                found: rec.coefficients.len(),
            });
        }
        Self::new(
            basis,
            DMatrix::from_row_slice(rec.n_out, rec.n_basis, &rec.coefficients),
        )
    }

    /// One row per output, one column per basis index.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("output");
        for l in 0..self.n_basis() {
            out.push_str(&format!(",c{l}"));
        }
        out.push('\n');
        for (r, row) in self.coeffs.row_iter().enumerate() {
            out.push_str(&r.to_string());
            for v in row.iter() {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Serialized PCE: basis id plus row-major coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PceRecord {
    pub basis_id: String,
    pub n_out: usize,
    pub n_basis: usize,
    pub coefficients: Vec<f64>,
}

/// Galerkin projection of the pointwise product:
/// `w_ℓ = Σ_{i,j} p_i q_j T(i, j, ℓ)` per row. A single-row operand is
/// broadcast against the other.
pub fn galerkin_product(p: &PceVector, q: &PceVector, t: &TripleProductTensor) -> Result<PceVector> {
    if !p.same_basis(q) || t.basis_id() != p.basis.id() || t.size() != p.n_basis() {
        return Err(Error::BasisMismatch);
    }
    let n_out = match (p.n_out(), q.n_out()) {
        (a, b) if a == b => a,
        (1, b) => b,
        (a, 1) => a,
        (a, b) => {
            return Err(Error::DimensionMismatch {
                what: "Galerkin product rows",
                expected: a,
                found: b,
            })
        }
    };
    let mut out = DMatrix::zeros(n_out, p.n_basis());
    for r in 0..n_out {
        let pr = p.coeffs.row(if p.n_out() == 1 { 0 } else { r });
        let qr = q.coeffs.row(if q.n_out() == 1 { 0 } else { r });
        for l in 0..p.n_basis() {
            out[(r, l)] = t.slice(l).iter().map(|&(i, j, v)| pr[i] * qr[j] * v).sum();
        }
    }
    PceVector::new(p.basis.clone(), out)
}

/// Pseudospectral projection `v_ℓ = E[g φ_ℓ]`; the rule must be exact to
/// degree `2d`.
pub fn project_function(
    g: impl Fn(&[f64]) -> Vec<f64>,
    basis: Arc<TotalDegreeBasis>,
    rule: &TensorRule,
) -> Result<PceVector> {
    let required = 2 * basis.degree();
    if rule.exact_degree < required {
        return Err(Error::InsufficientQuadrature {
            required,
            available: rule.exact_degree,
        });
    }
    let mut coeffs: Option<DMatrix<f64>> = None;
    for (p, w) in rule.points.iter().zip(&rule.weights) {
        let y = g(p);
        let phi = basis.eval(p)?;
        let c = coeffs.get_or_insert_with(|| DMatrix::zeros(y.len(), basis.len()));
        if y.len() != c.nrows() {
            return Err(Error::DimensionMismatch {
                what: "projected function output",
                expected: c.nrows(),
                found: y.len(),
            });
        }
        for (r, yr) in y.iter().enumerate() {
            for (l, ph) in phi.iter().enumerate() {
                c[(r, l)] += w * yr * ph;
            }
        }
    }
    let coeffs = coeffs.ok_or_else(|| Error::InvalidArgument("empty quadrature rule".into()))?;
    PceVector::new(basis, coeffs)
}

/// Least-squares fit of `y_k ≈ V Φ(ξ_k)` through an SVD of the design matrix.
pub fn regress(samples: &[(Vec<f64>, Vec<f64>)], basis: Arc<TotalDegreeBasis>) -> Result<PceVector> {
    let n_basis = basis.len();
    if samples.len() < n_basis {
        return Err(Error::RankDeficient {
            rank: samples.len(),
            required: n_basis,
        });
    }
    let n_out = samples[0].1.len();
    let mut design = DMatrix::zeros(samples.len(), n_basis);
    let mut rhs = DMatrix::zeros(samples.len(), n_out);
    for (k, (xi, y)) in samples.iter().enumerate() {
        if y.len() != n_out {
            return Err(Error::DimensionMismatch {
                what: "regression output",
                expected: n_out,
                found: y.len(),
            });
        }
        for (l, v) in basis.eval(xi)?.into_iter().enumerate() {
            design[(k, l)] = v;
        }
        for (r, v) in y.iter().enumerate() {
            rhs[(k, r)] = *v;
        }
    }
    let svd = design.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * f64::EPSILON * samples.len().max(n_basis) as f64;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < n_basis {
        return Err(Error::RankDeficient {
            rank,
            required: n_basis,
        });
    }
    let sol = svd.solve(&rhs, tol).map_err(|e| Error::Numerical(e.to_string()))?;
    PceVector::new(basis, sol.transpose())
}
