//! Stochastic MPC over PCE coefficient dynamics.
//!
//! The finite-horizon problem is condensed: the decision variables are the
//! nominal inputs `η_0..η_{N−1}` and every predicted coefficient state is
//! affine in them, `X_k = Φ_k X_0 + Γ_k η`. Orthonormality turns expected
//! quadratic costs into sums over coefficient blocks, and each polytope row
//! becomes a second-order cone through the Cantelli bound.
//!
//! The resulting cone program is solved by ADMM (OSQP-style splitting with
//! conic projections) with fixed step `ρ = 1` and over-relaxation `α = 1.6`.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::chance::{cantelli_factor, ChanceSpec, Polytope};
use crate::error::{Error, Result};
use crate::multibasis::{TotalDegreeBasis, TripleProductTensor};
use crate::propagate::{dirac_state, expand_linear, sample_rng, ExpandedLinearSystem, ParametricLinearSystem};

pub const RICCATI_TOL: f64 = 1e-12;
pub const RICCATI_MAX_ITER: usize = 10_000;

/// Input parameterization inside the prediction.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    /// `u_k = η_k`.
    OpenLoop,
    /// `u_k = η_k − K (x_k − E[x_k])` with a fixed gain.
    Prestabilized { gain: DMatrix<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputBox {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmpcProblem {
    pub horizon: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub terminal: DMatrix<f64>,
    pub input_box: Option<InputBox>,
    pub state_constraints: Option<Polytope>,
    pub chance: Option<ChanceSpec>,
    pub policy: Policy,
}

fn check_psd(m: &DMatrix<f64>, what: &str, strict: bool) -> Result<()> {
    if !m.is_square() || (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return Err(Error::InvalidArgument(format!("{what} must be square and symmetric")));
    }
    let min = m.clone().symmetric_eigen().eigenvalues.min();
    let ok = if strict {
        min > 0.0
    } else {
        min >= -1e-12 * m.amax().max(1.0)
    };
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{what} must be positive {}definite (min eigenvalue {min:e})",
            if strict { "" } else { "semi" }
        )))
    }
}

impl SmpcProblem {
    pub fn validate(&self, n_x: usize, n_u: usize) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be ≥ 1".into()));
        }
        let dims = |m: &DMatrix<f64>, n: usize, what: &'static str| -> Result<()> {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: n,
                    found: m.nrows(),
                });
            }
            Ok(())
        };
        dims(&self.q, n_x, "Q")?;
        dims(&self.terminal, n_x, "terminal weight")?;
        dims(&self.r, n_u, "R")?;
        check_psd(&self.q, "Q", false)?;
        check_psd(&self.terminal, "terminal weight", false)?;
        check_psd(&self.r, "R", true)?;
        if let Some(b) = &self.input_box {
            if b.lower.len() != n_u || b.upper.len() != n_u {
                return Err(Error::DimensionMismatch {
                    what: "input box",
                    expected: n_u,
                    found: b.lower.len(),
                });
            }
            if b.lower.iter().zip(b.upper.iter()).any(|(l, u)| l > u) {
                return Err(Error::InvalidArgument("input box lower > upper".into()));
            }
        }
        if let Some(p) = &self.state_constraints {
            if p.n_x() != n_x {
                return Err(Error::DimensionMismatch {
                    what: "state polytope columns",
                    expected: n_x,
                    found: p.n_x(),
                });
            }
            let spec = self
                .chance
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("state constraints need a chance spec".into()))?;
            spec.validate()?;
            if spec.allocation.len() != p.n_rows() {
                return Err(Error::DimensionMismatch {
                    what: "violation budgets",
                    expected: p.n_rows(),
                    found: spec.allocation.len(),
                });
            }
        }
        if let Policy::Prestabilized { gain } = &self.policy {
            if gain.nrows() != n_u || gain.ncols() != n_x {
                return Err(Error::DimensionMismatch {
                    what: "feedback gain",
                    expected: n_u * n_x,
                    found: gain.len(),
                });
            }
        }
        Ok(())
    }
}

/// LQR gain and Riccati solution; convention `u = −K x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lqr {
    pub gain: DMatrix<f64>,
    pub cost_to_go: DMatrix<f64>,
    pub iterations: usize,
}

/// Discrete Riccati fixed-point iteration started from `P = Q`.
pub fn lqr_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<Lqr> {
    let gain_for = |p: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let s = r + b.transpose() * p * b;
        let bt_pa = b.transpose() * p * a;
        s.clone()
            .cholesky()
            .map(|c| c.solve(&bt_pa))
            .or_else(|| s.lu().solve(&bt_pa))
            .ok_or_else(|| Error::Numerical("R + BᵀPB is singular".into()))
    };
    let mut p = q.clone();
    for it in 1..=RICCATI_MAX_ITER {
        let k = gain_for(&p)?;
        let next = q + a.transpose() * &p * a - a.transpose() * &p * b * &k;
        let next = (&next + next.transpose()) * 0.5;
        let delta = (&next - &p).amax();
        p = next;
        if !p.iter().all(|v| v.is_finite()) {
            break;
        }
        if delta <= RICCATI_TOL * p.amax().max(1.0) {
            return Ok(Lqr {
                gain: gain_for(&p)?,
                cost_to_go: p,
                iterations: it,
            });
        }
    }
    Err(Error::NotStabilizable {
        iterations: RICCATI_MAX_ITER,
    })
}

/// `‖z_coeff·x + z_offset‖ ≤ t_coeffᵀx + t_offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrderCone {
    pub t_coeff: DVector<f64>,
    pub t_offset: f64,
    pub z_coeff: DMatrix<f64>,
    pub z_offset: DVector<f64>,
}

impl SecondOrderCone {
    /// `‖z‖ − t` at `x` (nonpositive when satisfied).
    pub fn residual(&self, x: &DVector<f64>) -> f64 {
        let t = self.t_coeff.dot(x) + self.t_offset;
        let z = &self.z_coeff * x + &self.z_offset;
        z.norm() - t
    }
}

/// `min ½xᵀHx + fᵀx + c` subject to equalities, a variable box and
/// second-order cones.
#[derive(Debug, Clone, PartialEq)]
pub struct ConeProgram {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
    pub equalities: Option<(DMatrix<f64>, DVector<f64>)>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub cones: Vec<SecondOrderCone>,
}

impl ConeProgram {
    pub fn unconstrained(hessian: DMatrix<f64>, linear: DVector<f64>, constant: f64) -> Self {
        let n = linear.len();
        ConeProgram {
            hessian,
            linear,
            constant,
            equalities: None,
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
            cones: vec![],
        }
    }

    pub fn n_var(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x) + self.constant
    }

    /// Largest violation of any box, equality or cone row at `x`.
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..x.len() {
            worst = worst.max(self.lower[i] - x[i]).max(x[i] - self.upper[i]);
        }
        if let Some((a, b)) = &self.equalities {
            worst = worst.max((a * x - b).amax());
        }
        for c in &self.cones {
            worst = worst.max(c.residual(x));
        }
        worst
    }

    fn validate(&self) -> Result<()> {
        let n = self.n_var();
        if self.hessian.nrows() != n || self.hessian.ncols() != n || self.lower.len() != n || self.upper.len() != n {
            return Err(Error::DimensionMismatch {
                what: "cone program",
                expected: n,
                found: self.hessian.nrows(),
            });
        }
        for c in &self.cones {
            if c.t_coeff.len() != n || c.z_coeff.ncols() != n || c.z_coeff.nrows() != c.z_offset.len() {
                return Err(Error::DimensionMismatch {
                    what: "cone block",
                    expected: n,
                    found: c.z_coeff.ncols(),
                });
            }
        }
        if let Some((a, b)) = &self.equalities {
            if a.ncols() != n || a.nrows() != b.len() {
                return Err(Error::DimensionMismatch {
                    what: "equality block",
                    expected: n,
                    found: a.ncols(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    warm: WarmStart,
}

impl Solution {
    /// Splits the decision vector into `N` inputs of length `n_u`.
    pub fn inputs(&self, n_u: usize) -> Vec<DVector<f64>> {
        self.x.as_slice().chunks(n_u).map(DVector::from_column_slice).collect()
    }

    pub fn warm_start(&self) -> &WarmStart {
        &self.warm
    }
}

/// ADMM iterates carried between related solves.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    /// Iterations between infeasibility checks.
    pub infeasibility_window: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 50_000,
            rho: 1.0,
            sigma: 1e-6,
            alpha: 1.6,
            infeasibility_window: 1000,
        }
    }
}

/// Solves with default step parameters.
pub fn solve_cone(cp: &ConeProgram, tol: f64, max_iter: usize) -> Result<Solution> {
    let settings = SolverSettings {
        tol,
        max_iter,
        ..SolverSettings::default()
    };
    solve_cone_with(cp, &settings, None)
}

#[derive(Clone, Copy, PartialEq)]
enum RowSet {
    Interval {
        lo: f64,
        hi: f64,
    },
    /// First row of a cone block of `len` rows; `offset` indexes `offsets`.
    Cone {
        len: usize,
    },
    ConeTail,
}

/// Constraint rows in solver form: `s = A x`, `s ∈ C`.
struct Rows {
    a: Vec<f64>, // row-major m × n
    m: usize,
    sets: Vec<RowSet>,
    offsets: Vec<f64>,
}

fn assemble_rows(cp: &ConeProgram) -> Rows {
    let n = cp.n_var();
    let mut a = Vec::new();
    let mut sets = Vec::new();
    let mut offsets = Vec::new();
    let mut push_row = |row: &[f64], set: RowSet, off: f64, a: &mut Vec<f64>| {
        a.extend_from_slice(row);
        sets.push(set);
        offsets.push(off);
    };
    if let Some((ae, be)) = &cp.equalities {
        for (i, r) in ae.row_iter().enumerate() {
            let norm = r.norm().max(f64::MIN_POSITIVE);
            let row: Vec<f64> = r.iter().map(|v| v / norm).collect();
            let b = be[i] / norm;
            push_row(&row, RowSet::Interval { lo: b, hi: b }, 0.0, &mut a);
        }
    }
    for i in 0..n {
        if cp.lower[i].is_finite() || cp.upper[i].is_finite() {
            let mut row = vec![0.0; n];
            row[i] = 1.0;
            push_row(
                &row,
                RowSet::Interval {
                    lo: cp.lower[i],
                    hi: cp.upper[i],
                },
                0.0,
                &mut a,
            );
        }
    }
    for c in &cp.cones {
        let len = 1 + c.z_offset.len();
        let mut scale = c.t_coeff.norm();
        for r in c.z_coeff.row_iter() {
            scale = scale.max(r.norm());
        }
        let s = if scale > 0.0 { 1.0 / scale } else { 1.0 };
        let row: Vec<f64> = c.t_coeff.iter().map(|v| v * s).collect();
        push_row(&row, RowSet::Cone { len }, c.t_offset * s, &mut a);
        for (k, r) in c.z_coeff.row_iter().enumerate() {
            let row: Vec<f64> = r.iter().map(|v| v * s).collect();
            push_row(&row, RowSet::ConeTail, c.z_offset[k] * s, &mut a);
        }
    }
    let m = sets.len();
    Rows { a, m, sets, offsets }
}

impl Rows {
    fn mul(&self, x: &[f64], out: &mut [f64]) {
        let n = x.len();
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.a[i * n..(i + 1) * n];
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    fn mul_t(&self, y: &[f64], out: &mut [f64]) {
        let n = out.len();
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, yi) in y.iter().enumerate() {
            if *yi == 0.0 {
                continue;
            }
            let row = &self.a[i * n..(i + 1) * n];
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * yi;
            }
        }
    }

    /// Euclidean projection onto `C` in place.
    fn project(&self, v: &mut [f64]) {
        let mut i = 0;
        while i < self.m {
            match self.sets[i] {
                RowSet::Interval { lo, hi } => {
                    v[i] = v[i].clamp(lo, hi);
                    i += 1;
                }
                RowSet::Cone { len } => {
                    for k in i..i + len {
                        v[k] += self.offsets[k];
                    }
                    let t = v[i];
                    let zn = v[i + 1..i + len].iter().map(|z| z * z).sum::<f64>().sqrt();
                    if zn <= t {
                    } else if zn <= -t {
                        v[i..i + len].iter_mut().for_each(|x| *x = 0.0);
                    } else {
                        let a = 0.5 * (t + zn);
                        v[i] = a;
                        for z in v[i + 1..i + len].iter_mut() {
                            *z *= a / zn;
                        }
                    }
                    for k in i..i + len {
                        v[k] -= self.offsets[k];
                    }
                    i += len;
                }
                RowSet::ConeTail => unreachable!("cone tail without head"),
            }
        }
    }

    /// Support function of `C` at `dy` if finite and negative enough to
    /// certify infeasibility.
    fn certifies_infeasible(&self, dy: &[f64], tol: f64) -> bool {
        let mut support = 0.0;
        let mut i = 0;
        while i < self.m {
            match self.sets[i] {
                RowSet::Interval { lo, hi } => {
                    let d = dy[i];
                    if d > 0.0 {
                        if !hi.is_finite() {
                            return false;
                        }
                        support += hi * d;
                    } else if d < 0.0 {
                        if !lo.is_finite() {
                            return false;
                        }
                        support += lo * d;
                    }
                    i += 1;
                }
                RowSet::Cone { len } => {
                    // sup over K − o of dyᵀs is finite iff −dy ∈ K
                    let t = -dy[i];
                    let zn = dy[i + 1..i + len].iter().map(|z| z * z).sum::<f64>().sqrt();
                    if zn > t + tol {
                        return false;
                    }
                    for k in i..i + len {
                        support -= dy[k] * self.offsets[k];
                    }
                    i += len;
                }
                RowSet::ConeTail => unreachable!(),
            }
        }
        support < -tol
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// ADMM on `min ½xᵀPx + qᵀx  s.t.  Ax ∈ C` with optional warm start.
pub fn solve_cone_with(cp: &ConeProgram, settings: &SolverSettings, warm: Option<&WarmStart>) -> Result<Solution> {
    cp.validate()?;
    let n = cp.n_var();
    let rows = assemble_rows(cp);
    let m = rows.m;
    let obj_scale = 1.0 / cp.hessian.amax().max(cp.linear.amax()).max(1.0);
    let p = &cp.hessian * obj_scale;
    let q: Vec<f64> = cp.linear.iter().map(|v| v * obj_scale).collect();
    let (rho, sigma, alpha) = (settings.rho, settings.sigma, settings.alpha);

    let a_mat = DMatrix::from_row_slice(m, n, &rows.a);
    let kkt = &p + DMatrix::identity(n, n) * sigma + a_mat.transpose() * &a_mat * rho;
    let chol: Cholesky<f64, Dyn> = kkt
        .cholesky()
        .ok_or_else(|| Error::Numerical("KKT matrix not positive definite; is H PSD?".into()))?;

    let (mut x, mut z, mut y) = match warm {
        Some(w) if w.x.len() == n && w.z.len() == m && w.y.len() == m => (w.x.clone(), w.z.clone(), w.y.clone()),
        _ => (vec![0.0; n], vec![0.0; m], vec![0.0; m]),
    };
    let mut rhs = DVector::zeros(n);
    let mut xt = vec![0.0; n];
    let mut zt = vec![0.0; m];
    let mut tmp_n = vec![0.0; n];
    let mut ax = vec![0.0; m];
    let mut y_mark = y.clone();
    let mut rp_mark = f64::INFINITY;
    let mut status = SolveStatus::MaxIter;
    let (mut rp, mut rd) = (f64::INFINITY, f64::INFINITY);
    let mut iterations = settings.max_iter;

    for it in 1..=settings.max_iter {
        // x̃ = (P + σI + ρAᵀA)⁻¹ (σx − q + Aᵀ(ρz − y))
        for k in 0..m {
            zt[k] = rho * z[k] - y[k];
        }
        rows.mul_t(&zt, &mut tmp_n);
        for k in 0..n {
            rhs[k] = sigma * x[k] - q[k] + tmp_n[k];
        }
        chol.solve_mut(&mut rhs);
        xt.copy_from_slice(rhs.as_slice());
        rows.mul(&xt, &mut zt);
        for k in 0..n {
            x[k] = alpha * xt[k] + (1.0 - alpha) * x[k];
        }
        for k in 0..m {
            let zh = alpha * zt[k] + (1.0 - alpha) * z[k];
            zt[k] = zh;
            z[k] = zh + y[k] / rho;
        }
        rows.project(&mut z);
        for k in 0..m {
            y[k] += rho * (zt[k] - z[k]);
        }

        if it % 10 == 0 || it == settings.max_iter {
            rows.mul(&x, &mut ax);
            rp = ax.iter().zip(&z).fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
            rows.mul_t(&y, &mut tmp_n);
            let px = &p * DVector::from_column_slice(&x);
            rd = (0..n).fold(0.0f64, |acc, k| acc.max((px[k] + q[k] + tmp_n[k]).abs()));
            let eps_p = settings.tol + settings.tol * inf_norm(&ax).max(inf_norm(&z));
            let eps_d = settings.tol + settings.tol * px.amax().max(inf_norm(&tmp_n)).max(inf_norm(&q));
            if rp <= eps_p && rd <= eps_d {
                status = SolveStatus::Optimal;
                iterations = it;
                break;
            }
        }

        if it % settings.infeasibility_window == 0 {
            let dy: Vec<f64> = y.iter().zip(&y_mark).map(|(a, b)| a - b).collect();
            let dyn_ = inf_norm(&dy);
            if dyn_ > 0.0 {
                rows.mul_t(&dy, &mut tmp_n);
                let tol = 1e-6 * dyn_;
                let stalled = rp >= 0.5 * rp_mark;
                if stalled && inf_norm(&tmp_n) <= tol && rows.certifies_infeasible(&dy, tol) {
                    status = SolveStatus::Infeasible;
                    iterations = it;
                    break;
                }
            }
            y_mark.copy_from_slice(&y);
            rp_mark = rp;
        }
    }

    let xv = DVector::from_column_slice(&x);
    Ok(Solution {
        objective: cp.objective(&xv),
        x: xv,
        status,
        iterations,
        primal_residual: rp,
        dual_residual: rd / obj_scale,
        warm: WarmStart { x, z, y },
    })
}

/// Precomputed condensed prediction for a fixed problem and expanded system.
#[derive(Debug, Clone)]
pub struct SurrogateBuilder {
    #[allow(dead_code)]
    n_u: usize,
    n_x: usize,
    n_basis: usize,
    horizon: usize,
    system: ExpandedLinearSystem,
    /// `Φ_k`, `k = 0..=N`.
    phi: Vec<DMatrix<f64>>,
    /// `Γ_k`, `k = 0..=N`.
    gamma: Vec<DMatrix<f64>>,
    hessian: DMatrix<f64>,
    /// `f = F X_0`.
    linear_map: DMatrix<f64>,
    /// `c = X_0ᵀ C X_0`.
    constant_form: DMatrix<f64>,
    /// One entry per (step k ≥ 1, polytope row i).
    cone_rows: Vec<ConeTemplate>,
    lower: DVector<f64>,
    upper: DVector<f64>,
}

#[derive(Debug, Clone)]
struct ConeTemplate {
    step: usize,
    row: usize,
    bound: f64,
    /// `g_iᵀ E_0 Γ_k`, `g_iᵀ E_0 Φ_k`.
    mean_eta: DVector<f64>,
    mean_x0: DVector<f64>,
    /// `κ_i (I ⊗ g_iᵀ) E_{1..L} Γ_k`, likewise for `Φ_k`.
    spread_eta: DMatrix<f64>,
    spread_x0: DMatrix<f64>,
}

fn block_diag_weights(n_basis: usize, first: &DMatrix<f64>, rest: &DMatrix<f64>) -> DMatrix<f64> {
    let nx = first.nrows();
    let mut w = DMatrix::zeros(nx * n_basis, nx * n_basis);
    for l in 0..n_basis {
        let src = if l == 0 { first } else { rest };
        w.view_mut((l * nx, l * nx), (nx, nx)).copy_from(src);
    }
    w
}

impl SurrogateBuilder {
    /// `exp` is the open-loop expansion; the policy's feedback is applied here.
    pub fn new(prob: &SmpcProblem, exp: &ExpandedLinearSystem) -> Result<Self> {
        let (nx, nu, nb) = (exp.n_x, exp.n_u, exp.n_basis);
        prob.validate(nx, nu)?;
        let n = prob.horizon;
        let (system, stage_rest) = match &prob.policy {
            Policy::OpenLoop => (exp.clone(), prob.q.clone()),
            Policy::Prestabilized { gain } => {
                let sys = match &exp.feedback {
                    Some(k) if k == gain => exp.clone(),
                    Some(_) => return Err(Error::InvalidArgument("expanded system has a different gain".into())),
                    None => exp.with_feedback(gain)?,
                };
                (sys, &prob.q + gain.transpose() * &prob.r * gain)
            }
        };
        let nl = system.state_len();
        let nv = n * nu;

        let mut phi = Vec::with_capacity(n + 1);
        let mut gamma = Vec::with_capacity(n + 1);
        phi.push(DMatrix::identity(nl, nl));
        gamma.push(DMatrix::zeros(nl, nv));
        for k in 0..n {
            let next_phi = &system.a_hat * &phi[k];
            let mut next_gamma = &system.a_hat * &gamma[k];
            let mut blk = next_gamma.columns_mut(k * nu, nu);
            blk += &system.b_hat;
            phi.push(next_phi);
            gamma.push(next_gamma);
        }

        let w_stage = block_diag_weights(nb, &prob.q, &stage_rest);
        let w_term = block_diag_weights(nb, &prob.terminal, &prob.terminal);
        let mut hessian = DMatrix::zeros(nv, nv);
        let mut linear_map = DMatrix::zeros(nv, nl);
        let mut constant_form = DMatrix::zeros(nl, nl);
        for k in 0..=n {
            let w = if k == n { &w_term } else { &w_stage };
            let gw = gamma[k].transpose() * w;
            hessian += &gw * &gamma[k];
            linear_map += &gw * &phi[k];
            constant_form += phi[k].transpose() * w * &phi[k];
        }
        for k in 0..n {
            let mut blk = hessian.view_mut((k * nu, k * nu), (nu, nu));
            blk += &prob.r;
        }
        hessian *= 2.0;
        linear_map *= 2.0;
        let hessian = (&hessian + hessian.transpose()) * 0.5;

        let mut cone_rows = Vec::new();
        if let (Some(poly), Some(spec)) = (&prob.state_constraints, &prob.chance) {
            for k in 1..=n {
                for (i, g) in poly.g.row_iter().enumerate() {
                    let kappa = cantelli_factor(spec.allocation[i]);
                    let block_row =
                        |m: &DMatrix<f64>, l: usize| -> DVector<f64> { (g * m.rows(l * nx, nx)).transpose() };
                    let mut spread_eta = DMatrix::zeros(nb - 1, nv);
                    let mut spread_x0 = DMatrix::zeros(nb - 1, nl);
                    for l in 1..nb {
                        spread_eta.set_row(l - 1, &(block_row(&gamma[k], l) * kappa).transpose());
                        spread_x0.set_row(l - 1, &(block_row(&phi[k], l) * kappa).transpose());
                    }
                    cone_rows.push(ConeTemplate {
                        step: k,
                        row: i,
                        bound: poly.bounds[i],
                        mean_eta: block_row(&gamma[k], 0),
                        mean_x0: block_row(&phi[k], 0),
                        spread_eta,
                        spread_x0,
                    });
                }
            }
        }

        let (lower, upper) = match &prob.input_box {
            Some(b) => (
                DVector::from_iterator(nv, (0..n).flat_map(|_| b.lower.iter().copied())),
                DVector::from_iterator(nv, (0..n).flat_map(|_| b.upper.iter().copied())),
            ),
            None => (
                DVector::from_element(nv, f64::NEG_INFINITY),
                DVector::from_element(nv, f64::INFINITY),
            ),
        };

        Ok(Self {
            n_u: nu,
            n_x: nx,
            n_basis: nb,
            horizon: n,
            system,
            phi,
            gamma,
            hessian,
            linear_map,
            constant_form,
            cone_rows,
            lower,
            upper,
        })
    }

    /// The (possibly closed-loop) expanded system used for prediction.
    pub fn system(&self) -> &ExpandedLinearSystem {
        &self.system
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Predicted stacked coefficients `X_k` for `k = 0..=N`.
    pub fn predict(&self, x0: &DVector<f64>, eta: &DVector<f64>) -> Vec<DVector<f64>> {
        self.phi
            .iter()
            .zip(&self.gamma)
            .map(|(p, g)| p * x0 + g * eta)
            .collect()
    }

    /// The cone program for initial coefficient state `x0`.
    pub fn program(&self, x0: &DVector<f64>) -> Result<ConeProgram> {
        if x0.len() != self.n_x * self.n_basis {
            return Err(Error::DimensionMismatch {
                what: "initial coefficient state",
                expected: self.n_x * self.n_basis,
                found: x0.len(),
            });
        }
        let cones = self
            .cone_rows
            .iter()
            .map(|c| SecondOrderCone {
                t_coeff: -&c.mean_eta,
                t_offset: c.bound - c.mean_x0.dot(x0),
                z_coeff: c.spread_eta.clone(),
                z_offset: &c.spread_x0 * x0,
            })
            .collect();
        Ok(ConeProgram {
            hessian: self.hessian.clone(),
            linear: &self.linear_map * x0,
            constant: x0.dot(&(&self.constant_form * x0)),
            equalities: None,
            lower: self.lower.clone(),
            upper: self.upper.clone(),
            cones,
        })
    }

    /// `(step, row)` for each cone of [`SurrogateBuilder::program`], in order.
    pub fn cone_labels(&self) -> Vec<(usize, usize)> {
        self.cone_rows.iter().map(|c| (c.step, c.row)).collect()
    }
}

/// Builds the surrogate cone program for one initial coefficient state.
pub fn build_surrogate(prob: &SmpcProblem, exp: &ExpandedLinearSystem, x0: &DVector<f64>) -> Result<ConeProgram> {
    SurrogateBuilder::new(prob, exp)?.program(x0)
}

/// `Σ_ℓ v_ℓᵀ Q v_ℓ = E[xᵀQx]` for a stacked coefficient state.
pub fn expected_quadratic(x: &DVector<f64>, q: &DMatrix<f64>) -> f64 {
    let nx = q.nrows();
    x.as_slice()
        .chunks(nx)
        .map(|v| {
            let v = DVector::from_column_slice(v);
            v.dot(&(q * &v))
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub state: Vec<f64>,
    pub input: Vec<f64>,
    pub next_state: Vec<f64>,
    /// Predicted stacked coefficients of the next state.
    pub predicted: Vec<f64>,
    /// Whether `next_state` lies outside the state polytope.
    pub violated: bool,
    pub stage_cost: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    /// The shifted previous plan was applied because the solve failed.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopTrace {
    pub seed: u64,
    /// Germ draw defining this run's plant.
    pub germ: Vec<f64>,
    pub steps: Vec<TraceStep>,
}

impl ClosedLoopTrace {
    pub fn violations(&self) -> usize {
        self.steps.iter().filter(|s| s.violated).count()
    }

    pub fn fallbacks(&self) -> usize {
        self.steps.iter().filter(|s| s.fallback).count()
    }

    pub fn total_cost(&self) -> f64 {
        self.steps.iter().map(|s| s.stage_cost).sum()
    }

    pub fn csv_header(n_u: usize, n_x: usize) -> String {
        let mut h = String::from("step");
        for i in 0..n_u {
            h.push_str(&format!(",u{i}"));
        }
        for i in 0..n_x {
            h.push_str(&format!(",x{i}"));
        }
        h.push_str(",violated,stage_cost,status,iterations,fallback");
        h
    }

    pub fn csv_rows(&self) -> Vec<String> {
        self.steps
            .iter()
            .map(|s| {
                let mut r = s.step.to_string();
                for v in &s.input {
                    r.push_str(&format!(",{v}"));
                }
                for v in &s.state {
                    r.push_str(&format!(",{v}"));
                }
                let status = match s.status {
                    SolveStatus::Optimal => "optimal",
                    SolveStatus::MaxIter => "max_iter",
                    SolveStatus::Infeasible => "infeasible",
                };
                r.push_str(&format!(
                    ",{},{},{status},{},{}",
                    u8::from(s.violated),
                    s.stage_cost,
                    s.iterations,
                    u8::from(s.fallback)
                ));
                r
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let n_u = self.steps.first().map_or(0, |s| s.input.len());
        let n_x = self.steps.first().map_or(0, |s| s.state.len());
        let mut out = Self::csv_header(n_u, n_x);
        out.push('\n');
        for r in self.csv_rows() {
            out.push_str(&r);
            out.push('\n');
        }
        out
    }
}

/// Receding-horizon SMPC controller with a prepared surrogate.
#[derive(Debug, Clone)]
pub struct SmpcController {
    problem: SmpcProblem,
    plant: ParametricLinearSystem,
    builder: SurrogateBuilder,
    settings: SolverSettings,
}

impl SmpcController {
    pub fn new(
        problem: SmpcProblem,
        plant: ParametricLinearSystem,
        tensor: &TripleProductTensor,
        settings: SolverSettings,
    ) -> Result<Self> {
        let exp = expand_linear(&plant, tensor)?;
        let builder = SurrogateBuilder::new(&problem, &exp)?;
        Ok(Self {
            problem,
            plant,
            builder,
            settings,
        })
    }

    pub fn builder(&self) -> &SurrogateBuilder {
        &self.builder
    }

    pub fn basis(&self) -> &Arc<TotalDegreeBasis> {
        self.plant.basis()
    }

    /// Solves the surrogate from a measured (deterministic) state.
    pub fn solve_from(&self, x: &DVector<f64>, warm: Option<&WarmStart>) -> Result<(ConeProgram, Solution)> {
        let x0 = dirac_state(x, self.builder.n_basis);
        let cp = self.builder.program(&x0)?;
        let sol = solve_cone_with(&cp, &self.settings, warm)?;
        Ok((cp, sol))
    }

    /// Closed loop on one plant realization drawn from `seed`.
    pub fn run(&self, x0: &DVector<f64>, steps: usize, seed: u64) -> Result<ClosedLoopTrace> {
        let nu = self.plant.n_u();
        let samplers = self.basis().germ_samplers()?;
        let mut rng = sample_rng(seed, 0);
        let germ = TotalDegreeBasis::sample_germ(&samplers, &mut rng);
        let (a_true, b_true) = self.plant.sample_matrices(&germ)?;

        let mut x = x0.clone();
        let mut plan: Vec<DVector<f64>> = Vec::new();
        let mut warm: Option<WarmStart> = None;
        let mut records = Vec::with_capacity(steps);
        for t in 0..steps {
            let (_, sol) = self.solve_from(&x, warm.as_ref())?;
            let ok = sol.status == SolveStatus::Optimal;
            if ok {
                plan = sol.inputs(nu);
                warm = Some(sol.warm_start().clone());
            } else if t == 0 {
                return Err(Error::InfeasibleAtStart(format!("{:?}", sol.status)));
            } else {
                if plan.len() > 1 {
                    plan.remove(0);
                }
                warm = None;
            }
            // Full-state measurement: x − E[x_{t|t}] = 0, so the feedback
            // term of the prestabilized policy vanishes at the applied step.
            let u = plan[0].clone();
            let predicted = self.builder.system.a_hat.clone() * dirac_state(&x, self.builder.n_basis)
                + &self.builder.system.b_hat * &u;
            let next = &a_true * &x + &b_true * &u;
            let violated = self
                .problem
                .state_constraints
                .as_ref()
                .is_some_and(|p| !p.contains(&next));
            let stage_cost = x.dot(&(&self.problem.q * &x)) + u.dot(&(&self.problem.r * &u));
            records.push(TraceStep {
                step: t,
                state: x.iter().copied().collect(),
                input: u.iter().copied().collect(),
                next_state: next.iter().copied().collect(),
                predicted: predicted.iter().copied().collect(),
                violated,
                stage_cost,
                status: sol.status,
                iterations: sol.iterations,
                fallback: !ok,
            });
            x = next;
        }
        Ok(ClosedLoopTrace {
            seed,
            germ,
            steps: records,
        })
    }
}

/// One closed-loop run with default solver settings.
pub fn receding_horizon(
    prob: &SmpcProblem,
    sys: &ParametricLinearSystem,
    x0: &DVector<f64>,
    steps: usize,
    seed: u64,
) -> Result<ClosedLoopTrace> {
    let tensor = sys.basis().triple_products()?;
    SmpcController::new(prob.clone(), sys.clone(), &tensor, SolverSettings::default())?.run(x0, steps, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn scalar_riccati() {
        let l = lqr_gain(&scalar(1.0), &scalar(1.0), &scalar(1.0), &scalar(1.0)).unwrap();
        let golden = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((l.cost_to_go[(0, 0)] - golden).abs() < 1e-10);
        assert!((l.gain[(0, 0)] - golden / (1.0 + golden)).abs() < 1e-10);
    }

    #[test]
    fn no_actuation_gives_zero_gain() {
        let l = lqr_gain(&scalar(0.5), &scalar(0.0), &scalar(1.0), &scalar(1.0)).unwrap();
        assert_eq!(l.gain[(0, 0)], 0.0);
        assert!((l.cost_to_go[(0, 0)] - 4.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn expensive_control_on_stable_plant() {
        let l = lqr_gain(&scalar(0.5), &scalar(1.0), &scalar(1.0), &scalar(1e6)).unwrap();
        assert!(l.gain[(0, 0)].abs() <= 1e-5);
    }

    #[test]
    fn unstabilizable_pair_errors() {
        let r = lqr_gain(&scalar(1.5), &scalar(0.0), &scalar(1.0), &scalar(1.0));
        assert!(matches!(r, Err(Error::NotStabilizable { .. })));
    }

    #[test]
    fn unconstrained_quadratic() {
        // (u − 1)² = u² − 2u + 1
        let cp = ConeProgram::unconstrained(scalar(2.0), DVector::from_element(1, -2.0), 1.0);
        let s = solve_cone(&cp, 1e-8, 50_000).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.x[0] - 1.0).abs() < 1e-6);
        assert!(s.objective.abs() < 1e-10);
    }

    #[test]
    fn box_constrained_quadratic() {
        let mut cp = ConeProgram::unconstrained(scalar(2.0), DVector::zeros(1), 0.0);
        cp.upper[0] = -1.0;
        let s = solve_cone(&cp, 1e-8, 50_000).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.x[0] + 1.0).abs() < 1e-6);
        assert!((s.objective - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cone_row_with_fixed_spread() {
        // u + 2·0.5 ≤ 0, written as ‖0.5‖ ≤ (−u)/2
        let mut cp = ConeProgram::unconstrained(scalar(2.0), DVector::zeros(1), 0.0);
        cp.cones.push(SecondOrderCone {
            t_coeff: DVector::from_element(1, -1.0),
            t_offset: 0.0,
            z_coeff: DMatrix::zeros(1, 1),
            z_offset: DVector::from_element(1, cantelli_factor(0.2) * 0.5),
        });
        let s = solve_cone(&cp, 1e-8, 50_000).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.x[0] + 1.0).abs() < 1e-6, "{}", s.x[0]);
    }

    #[test]
    fn infeasible_box_and_cone() {
        // u ≥ 1 (box) and u ≤ −1 (cone with zero spread)
        let mut cp = ConeProgram::unconstrained(scalar(2.0), DVector::zeros(1), 0.0);
        cp.lower[0] = 1.0;
        cp.cones.push(SecondOrderCone {
            t_coeff: DVector::from_element(1, -1.0),
            t_offset: -1.0,
            z_coeff: DMatrix::zeros(0, 1),
            z_offset: DVector::zeros(0),
        });
        let s = solve_cone(&cp, 1e-8, 50_000).unwrap();
        assert_eq!(s.status, SolveStatus::Infeasible);
    }

    #[test]
    fn expected_quadratic_sums_blocks() {
        let x = DVector::from_vec(vec![1.0, 1.0]);
        assert_eq!(expected_quadratic(&x, &scalar(1.0)), 2.0);
    }
}
