//! Uncertainty propagation through linear parametric dynamics.
//!
//! Intrusive route: `x⁺ = A(θ)x + B(θ)u` becomes a deterministic system on
//! the stacked coefficient vector `X = [v_0; v_1; ..; v_L]` (block `ℓ` holds
//! the `ℓ`-th PCE coefficient of the state). The Galerkin block
//! `(ℓ, i)` of `Â` is `Σ_j T(i, j, ℓ) A_j`.
//!
//! Oracle route: [`monte_carlo`] draws germ samples from per-sample ChaCha
//! substreams and reduces them in fixed-size chunks, so results do not depend
//! on how many worker threads run.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::multibasis::{TensorRule, TotalDegreeBasis, TripleProductTensor};
use crate::pce::{project_function, PceVector};

/// Default RK4 step for the coefficient ODE.
pub const DEFAULT_DT: f64 = 1e-3;
const MC_CHUNK: usize = 1024;

/// Linear system whose matrices are expansions in the germ.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricLinearSystem {
    n_x: usize,
    n_u: usize,
    /// Row `i·n_x + j` is the expansion of `A[i, j]`.
    a: PceVector,
    /// Row `i·n_u + j` is the expansion of `B[i, j]`.
    b: PceVector,
}

impl ParametricLinearSystem {
    pub fn new(n_x: usize, n_u: usize, a: PceVector, b: PceVector) -> Result<Self> {
        if a.n_out() != n_x * n_x {
            return Err(Error::DimensionMismatch {
                what: "A entries",
                expected: n_x * n_x,
                found: a.n_out(),
            });
        }
        if b.n_out() != n_x * n_u {
            return Err(Error::DimensionMismatch {
                what: "B entries",
                expected: n_x * n_u,
                found: b.n_out(),
            });
        }
        if !a.same_basis(&b) {
            return Err(Error::BasisMismatch);
        }
        Ok(Self { n_x, n_u, a, b })
    }

    /// Plant without parametric uncertainty, expressed over `basis`.
    pub fn deterministic(basis: Arc<TotalDegreeBasis>, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Self> {
        let n_x = a.nrows();
        let n_u = b.ncols();
        let a_vals: Vec<f64> = a.transpose().iter().copied().collect();
        let b_vals: Vec<f64> = b.transpose().iter().copied().collect();
        Self::new(
            n_x,
            n_u,
            PceVector::constant(basis.clone(), &a_vals),
            PceVector::constant(basis, &b_vals),
        )
    }

    /// Projects black-box `A(ξ)`, `B(ξ)` onto the basis.
    pub fn from_callbacks(
        basis: Arc<TotalDegreeBasis>,
        a: impl Fn(&[f64]) -> DMatrix<f64>,
        b: impl Fn(&[f64]) -> DMatrix<f64>,
        rule: &TensorRule,
    ) -> Result<Self> {
        let zero = vec![0.0; basis.n_germ()];
        let (n_x, n_u) = (a(&zero).nrows(), b(&zero).ncols());
        let flat = |m: DMatrix<f64>| m.transpose().iter().copied().collect::<Vec<f64>>();
        let pa = project_function(|xi| flat(a(xi)), basis.clone(), rule)?;
        let pb = project_function(|xi| flat(b(xi)), basis, rule)?;
        Self::new(n_x, n_u, pa, pb)
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn basis(&self) -> &Arc<TotalDegreeBasis> {
        self.a.basis()
    }

    pub fn a_pce(&self) -> &PceVector {
        &self.a
    }

    pub fn b_pce(&self) -> &PceVector {
        &self.b
    }

    /// `A_ℓ`, the `ℓ`-th coefficient matrix of `A(ξ)`.
    pub fn a_coefficient(&self, l: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_x, self.n_x, self.a.coeffs().column(l).as_slice())
    }

    pub fn b_coefficient(&self, l: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_x, self.n_u, self.b.coeffs().column(l).as_slice())
    }

    /// `(E[A], E[B])`.
    pub fn mean_matrices(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.a_coefficient(0), self.b_coefficient(0))
    }

    /// `(A(ξ), B(ξ))` at one germ point.
    pub fn sample_matrices(&self, xi: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let phi = DVector::from_vec(self.basis().eval(xi)?);
        let a = self.a.eval_with(&phi);
        let b = self.b.eval_with(&phi);
        Ok((
            DMatrix::from_row_slice(self.n_x, self.n_x, a.as_slice()),
            DMatrix::from_row_slice(self.n_x, self.n_u, b.as_slice()),
        ))
    }
}

/// Deterministic dynamics of the stacked PCE coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedLinearSystem {
    pub n_x: usize,
    pub n_u: usize,
    pub n_basis: usize,
    /// `n_x(L+1) × n_x(L+1)`.
    pub a_hat: DMatrix<f64>,
    /// `n_x(L+1) × n_u`: a deterministic input enters through `B_ℓ u`.
    pub b_hat: DMatrix<f64>,
    /// `n_x(L+1) × n_u(L+1)`: Galerkin input map for a random input.
    pub b_full: DMatrix<f64>,
    /// Gain `K` when the system is closed with `u = η − K(x − E[x])`.
    pub feedback: Option<DMatrix<f64>>,
    basis_id: String,
}

/// Galerkin expansion of `A(θ)x + B(θ)u` over the tensor's basis.
pub fn expand_linear(sys: &ParametricLinearSystem, t: &TripleProductTensor) -> Result<ExpandedLinearSystem> {
    if t.basis_id() != sys.basis().id() || t.size() != sys.basis().len() {
        return Err(Error::BasisMismatch);
    }
    let (nx, nu, nb) = (sys.n_x, sys.n_u, sys.basis().len());
    let a_coeffs: Vec<DMatrix<f64>> = (0..nb).map(|l| sys.a_coefficient(l)).collect();
    let b_coeffs: Vec<DMatrix<f64>> = (0..nb).map(|l| sys.b_coefficient(l)).collect();
    let mut a_hat = DMatrix::zeros(nx * nb, nx * nb);
    let mut b_full = DMatrix::zeros(nx * nb, nu * nb);
    for l in 0..nb {
        for &(i, j, v) in t.slice(l) {
            let mut blk = a_hat.view_mut((l * nx, i * nx), (nx, nx));
            blk += &a_coeffs[j] * v;
            let mut blk = b_full.view_mut((l * nx, i * nu), (nx, nu));
            blk += &b_coeffs[j] * v;
        }
    }
    let b_hat = b_full.columns(0, nu).into_owned();
    Ok(ExpandedLinearSystem {
        n_x: nx,
        n_u: nu,
        n_basis: nb,
        a_hat,
        b_hat,
        b_full,
        feedback: None,
        basis_id: t.basis_id().to_string(),
    })
}

impl ExpandedLinearSystem {
    pub fn state_len(&self) -> usize {
        self.n_x * self.n_basis
    }

    pub fn basis_id(&self) -> &str {
        &self.basis_id
    }

    /// Closes the loop with `u = η − K(x − E[x])`: coefficient `ℓ ≥ 1` of the
    /// input becomes `−K v_ℓ`, so `η` still enters only through block 0.
    pub fn with_feedback(&self, gain: &DMatrix<f64>) -> Result<ExpandedLinearSystem> {
        if gain.nrows() != self.n_u || gain.ncols() != self.n_x {
            return Err(Error::DimensionMismatch {
                what: "feedback gain",
                expected: self.n_u * self.n_x,
                found: gain.nrows() * gain.ncols(),
            });
        }
        if self.feedback.is_some() {
            return Err(Error::InvalidArgument("system already has feedback".into()));
        }
        let mut out = self.clone();
        for i in 1..self.n_basis {
            let bi = self.b_full.columns(i * self.n_u, self.n_u);
            let mut cols = out.a_hat.columns_mut(i * self.n_x, self.n_x);
            cols -= bi * gain;
        }
        out.feedback = Some(gain.clone());
        Ok(out)
    }

    /// `Â X + B̂ u`.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.state_len() {
            return Err(Error::DimensionMismatch {
                what: "stacked state",
                expected: self.state_len(),
                found: x.len(),
            });
        }
        if u.len() != self.n_u {
            return Err(Error::DimensionMismatch {
                what: "input",
                expected: self.n_u,
                found: u.len(),
            });
        }
        Ok(&self.a_hat * x + &self.b_hat * u)
    }

    /// Block `ℓ` (the `ℓ`-th coefficient) of a stacked state.
    pub fn block(&self, x: &DVector<f64>, l: usize) -> DVector<f64> {
        x.rows(l * self.n_x, self.n_x).into_owned()
    }
}

/// `[v_0; v_1; ..; v_L]` from a PCE state.
pub fn stack(p: &PceVector) -> DVector<f64> {
    DVector::from_iterator(
        p.n_out() * p.n_basis(),
        p.coeffs()
            .column_iter()
            .flat_map(|c| c.iter().copied().collect::<Vec<_>>()),
    )
}

/// Inverse of [`stack`].
pub fn unstack(x: &DVector<f64>, basis: Arc<TotalDegreeBasis>) -> Result<PceVector> {
    let nb = basis.len();
    if !x.len().is_multiple_of(nb) {
        return Err(Error::DimensionMismatch {
            what: "stacked state",
            expected: nb,
            found: x.len(),
        });
    }
    let nx = x.len() / nb;
    PceVector::new(basis, DMatrix::from_column_slice(nx, nb, x.as_slice()))
}

/// Stacked coefficients of a deterministic (Dirac) state.
pub fn dirac_state(x: &DVector<f64>, n_basis: usize) -> DVector<f64> {
    let mut out = DVector::zeros(x.len() * n_basis);
    out.rows_mut(0, x.len()).copy_from(x);
    out
}

/// Galerkin coefficient ODE for `dy/dt = −θ y`:
/// `da_ℓ/dt = −Σ_{i,j} v_j a_i T(i, j, ℓ)`.
#[derive(Debug, Clone)]
pub struct GalerkinOde {
    rate: PceVector,
    /// Per rate row: `M[ℓ, i] = Σ_j v_j T(i, j, ℓ)`.
    operators: Vec<DMatrix<f64>>,
}

impl GalerkinOde {
    pub fn new(rate: PceVector, t: &TripleProductTensor) -> Result<Self> {
        if t.basis_id() != rate.basis().id() || t.size() != rate.n_basis() {
            return Err(Error::BasisMismatch);
        }
        let nb = rate.n_basis();
        let operators = rate
            .coeffs()
            .row_iter()
            .map(|v| {
                let mut m = DMatrix::zeros(nb, nb);
                for l in 0..nb {
                    for &(i, j, tv) in t.slice(l) {
                        m[(l, i)] += v[j] * tv;
                    }
                }
                m
            })
            .collect();
        Ok(Self { rate, operators })
    }

    pub fn rate(&self) -> &PceVector {
        &self.rate
    }

    fn rhs(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(a.nrows(), a.ncols());
        for r in 0..a.nrows() {
            let m = &self.operators[if self.operators.len() == 1 { 0 } else { r }];
            let d = -(m * a.row(r).transpose());
            out.set_row(r, &d.transpose());
        }
        out
    }

    /// One classical RK4 step of size `dt`.
    pub fn step(&self, a: &DMatrix<f64>, dt: f64) -> Result<DMatrix<f64>> {
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        if self.operators.len() != 1 && self.operators.len() != a.nrows() {
            return Err(Error::DimensionMismatch {
                what: "ODE state rows",
                expected: self.operators.len(),
                found: a.nrows(),
            });
        }
        let k1 = self.rhs(a);
        let k2 = self.rhs(&(a + &k1 * (dt / 2.0)));
        let k3 = self.rhs(&(a + &k2 * (dt / 2.0)));
        let k4 = self.rhs(&(a + &k3 * dt));
        let next = a + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { time: f64::NAN });
        }
        Ok(next)
    }

    /// Integrates from `t = 0` and returns the coefficients at each requested
    /// time (times must be nondecreasing multiples of `dt`, up to rounding).
    pub fn integrate(&self, a0: &DMatrix<f64>, times: &[f64], dt: f64) -> Result<Vec<DMatrix<f64>>> {
        let mut out = Vec::with_capacity(times.len());
        let mut a = a0.clone();
        let mut k: u64 = 0;
        for &t in times {
            let target = (t / dt).round() as u64;
            while k < target {
                a = self.step(&a, dt).map_err(|e| match e {
                    Error::Divergence { .. } => Error::Divergence { time: k as f64 * dt },
                    e => e,
                })?;
                k += 1;
            }
            out.push(a.clone());
        }
        Ok(out)
    }
}

/// Convenience for the free-function style: one RK4 step.
pub fn galerkin_ode_step(ode: &GalerkinOde, a: &DMatrix<f64>, dt: f64) -> Result<DMatrix<f64>> {
    ode.step(a, dt)
}

/// Moments of a simulated trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct McSummary {
    pub times: Vec<f64>,
    /// `[time][output]`.
    pub mean: Vec<Vec<f64>>,
    /// Unbiased sample variance.
    pub variance: Vec<Vec<f64>>,
    /// `sqrt(variance / n)`.
    pub stderr: Vec<Vec<f64>>,
    pub n_samples: usize,
    pub seed: u64,
}

impl McSummary {
    /// Standard error of the sample variance under a normal approximation.
    pub fn variance_stderr(&self, t: usize, r: usize) -> f64 {
        self.variance[t][r] * (2.0 / (self.n_samples as f64 - 1.0)).sqrt()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,output,mean,variance,stderr\n");
        for (k, t) in self.times.iter().enumerate() {
            for r in 0..self.mean[k].len() {
                out.push_str(&format!(
                    "{t},{r},{},{},{}\n",
                    self.mean[k][r], self.variance[k][r], self.stderr[k][r]
                ));
            }
        }
        out
    }
}

/// Moments of a PCE trajectory in the same CSV layout as [`McSummary`]
/// (the stderr column is 0: the moments are exact for the expansion).
pub fn pce_moments_csv(times: &[f64], states: &[PceVector]) -> String {
    let mut out = String::from("time,output,mean,variance,stderr\n");
    for (t, p) in times.iter().zip(states) {
        let (m, v) = (p.mean(), p.variance());
        for r in 0..p.n_out() {
            out.push_str(&format!("{t},{r},{},{},0\n", m[r], v[r]));
        }
    }
    out
}

/// Independent generator for sample `index` of a run seeded with `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Clone)]
struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(len: usize) -> Self {
        Self {
            n: 0.0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / self.n;
            *s += d * (v - *m);
        }
    }

    fn merge(&mut self, o: &Welford) {
        if o.n == 0.0 {
            return;
        }
        let n = self.n + o.n;
        for k in 0..self.mean.len() {
            let d = o.mean[k] - self.mean[k];
            self.mean[k] += d * o.n / n;
            self.m2[k] += o.m2[k] + d * d * self.n * o.n / n;
        }
        self.n = n;
    }
}

/// Seeded Monte Carlo moments of a vector-valued simulation.
///
/// `simulate(rng, out)` fills `out` (length `n_times · n_out`, time-major)
/// from one sample. Sample `k` uses [`sample_rng`]`(seed, k)`; chunks of
/// 1024 samples are reduced in index order, so the result is bitwise
/// independent of the rayon pool size.
pub fn monte_carlo<F>(times: &[f64], n_out: usize, n_samples: usize, seed: u64, simulate: F) -> Result<McSummary>
where
    F: Fn(&mut ChaCha8Rng, &mut [f64]) -> Result<()> + Sync,
{
    if n_samples < 2 {
        return Err(Error::InvalidArgument("need at least 2 samples".into()));
    }
    let len = times.len() * n_out;
    let n_chunks = n_samples.div_ceil(MC_CHUNK);
    let chunks: Vec<Result<Welford>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = Welford::new(len);
            let mut buf = vec![0.0; len];
            for k in (c * MC_CHUNK)..((c + 1) * MC_CHUNK).min(n_samples) {
                let mut rng = sample_rng(seed, k as u64);
                simulate(&mut rng, &mut buf)?;
                acc.push(&buf);
            }
            Ok(acc)
        })
        .collect();
    let mut total = Welford::new(len);
    for c in chunks {
        total.merge(&c?);
    }
    let n = n_samples as f64;
    let reshape = |v: Vec<f64>| -> Vec<Vec<f64>> { v.chunks(n_out.max(1)).map(|c| c.to_vec()).collect() };
    let variance: Vec<f64> = total.m2.iter().map(|s| (s / (n - 1.0)).max(0.0)).collect();
    let stderr: Vec<f64> = variance.iter().map(|v| (v / n).sqrt()).collect();
    Ok(McSummary {
        times: times.to_vec(),
        mean: reshape(total.mean),
        variance: reshape(variance),
        stderr: reshape(stderr),
        n_samples,
        seed,
    })
}

/// Monte Carlo of `x_{t+1} = A(ξ)x_t + B(ξ)u_t` under a fixed open-loop
/// input sequence; moments at `t = 0..=inputs.len()`.
pub fn mc_propagate_linear(
    sys: &ParametricLinearSystem,
    x0: &DVector<f64>,
    inputs: &[DVector<f64>],
    n_samples: usize,
    seed: u64,
) -> Result<McSummary> {
    if x0.len() != sys.n_x {
        return Err(Error::DimensionMismatch {
            what: "initial state",
            expected: sys.n_x,
            found: x0.len(),
        });
    }
    if let Some(u) = inputs.iter().find(|u| u.len() != sys.n_u) {
        return Err(Error::DimensionMismatch {
            what: "input",
            expected: sys.n_u,
            found: u.len(),
        });
    }
    let samplers = sys.basis().germ_samplers()?;
    let times: Vec<f64> = (0..=inputs.len()).map(|t| t as f64).collect();
    monte_carlo(&times, sys.n_x, n_samples, seed, |rng, out| {
        let xi = TotalDegreeBasis::sample_germ(&samplers, rng);
        let (a, b) = sys.sample_matrices(&xi)?;
        let mut x = x0.clone();
        out[..sys.n_x].copy_from_slice(x.as_slice());
        for (t, u) in inputs.iter().enumerate() {
            x = &a * &x + &b * u;
            out[(t + 1) * sys.n_x..(t + 2) * sys.n_x].copy_from_slice(x.as_slice());
        }
        Ok(())
    })
}

/// Monte Carlo of the decay model `y(t) = y0 · exp(−θ t)` with `θ` drawn by
/// pushing germ samples through the rate expansion.
pub fn mc_propagate_decay(
    rate: &PceVector,
    y0: &[f64],
    times: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<McSummary> {
    if rate.n_out() != 1 && rate.n_out() != y0.len() {
        return Err(Error::DimensionMismatch {
            what: "decay rate rows",
            expected: y0.len(),
            found: rate.n_out(),
        });
    }
    let samplers = rate.basis().germ_samplers()?;
    let n = y0.len();
    monte_carlo(times, n, n_samples, seed, |rng, out| {
        let xi = TotalDegreeBasis::sample_germ(&samplers, rng);
        let theta = rate.sample_eval(&xi)?;
        for (k, t) in times.iter().enumerate() {
            for r in 0..n {
                let th = theta[if theta.len() == 1 { 0 } else { r }];
                out[k * n + r] = y0[r] * (-th * t).exp();
            }
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orthopoly::MeasureDescriptor;

    fn hermite(mu: f64, sigma: f64, d: usize) -> Arc<TotalDegreeBasis> {
        Arc::new(
            TotalDegreeBasis::from_measures(
                &[MeasureDescriptor::Gaussian {
                    mean: mu,
                    stddev: sigma,
                }],
                d,
            )
            .unwrap(),
        )
    }

    fn scalar_theta_system(mu: f64, sigma: f64, d: usize) -> ParametricLinearSystem {
        let b = hermite(mu, sigma, d);
        let a = PceVector::parameter(b.clone(), 0).unwrap();
        let bb = PceVector::constant(b, &[0.0]);
        ParametricLinearSystem::new(1, 1, a, bb).unwrap()
    }

    #[test]
    fn deterministic_expansion_is_block_diagonal() {
        let basis = hermite(0.0, 1.0, 2);
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, -0.2, 0.9]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 0.1]);
        let sys = ParametricLinearSystem::deterministic(basis.clone(), &a, &b).unwrap();
        let t = basis.triple_products().unwrap();
        let e = expand_linear(&sys, &t).unwrap();
        for l in 0..3 {
            for i in 0..3 {
                let blk = e.a_hat.view((l * 2, i * 2), (2, 2));
                let expect = if l == i { a.clone() } else { DMatrix::zeros(2, 2) };
                assert!((blk - expect).amax() < 1e-14);
            }
        }
        assert!((e.b_hat.rows(0, 2) - &b).amax() < 1e-14);
        assert!(e.b_hat.rows(2, 4).amax() < 1e-14);
    }

    #[test]
    fn scalar_theta_two_steps() {
        let (mu, sigma) = (1.0, 0.5);
        let sys = scalar_theta_system(mu, sigma, 2);
        let t = sys.basis().triple_products().unwrap();
        let e = expand_linear(&sys, &t).unwrap();
        let u = DVector::from_vec(vec![0.0]);
        let x1 = e.step(&DVector::from_vec(vec![1.0, 0.0, 0.0]), &u).unwrap();
        assert!((x1 - DVector::from_vec(vec![mu, sigma, 0.0])).amax() < 1e-14);
        let x2 = e
            .step(&e.step(&DVector::from_vec(vec![1.0, 0.0, 0.0]), &u).unwrap(), &u)
            .unwrap();
        assert!((x2[0] - 1.25).abs() < 1e-14);
    }

    #[test]
    fn step_zero_and_dims() {
        let sys = scalar_theta_system(1.0, 0.5, 2);
        let t = sys.basis().triple_products().unwrap();
        let e = expand_linear(&sys, &t).unwrap();
        let z = e.step(&DVector::zeros(3), &DVector::zeros(1)).unwrap();
        assert_eq!(z, DVector::zeros(3));
        assert!(matches!(
            e.step(&DVector::zeros(2), &DVector::zeros(1)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn stack_round_trip() {
        let basis = hermite(0.0, 1.0, 2);
        let p = PceVector::new(
            basis.clone(),
            DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
        )
        .unwrap();
        let s = stack(&p);
        assert_eq!(s.as_slice(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(unstack(&s, basis).unwrap(), p);
    }

    #[test]
    fn deterministic_rate_decays_exponentially() {
        let basis = hermite(0.0, 1.0, 3);
        let t = basis.triple_products().unwrap();
        let ode = GalerkinOde::new(PceVector::constant(basis.clone(), &[0.7]), &t).unwrap();
        let a0 = DMatrix::from_row_slice(1, 4, &[2.0, 0.0, 0.0, 0.0]);
        let a = ode.integrate(&a0, &[1.0], 1e-3).unwrap();
        assert!((a[0][(0, 0)] - 2.0 * (-0.7f64).exp()).abs() < 1e-12);
        assert!(ode.step(&a0, 0.0).is_err());
    }

    #[test]
    fn mc_is_reproducible_and_exact_for_deterministic() {
        let basis = hermite(0.0, 1.0, 1);
        let a = DMatrix::from_row_slice(1, 1, &[0.5]);
        let b = DMatrix::from_row_slice(1, 1, &[1.0]);
        let sys = ParametricLinearSystem::deterministic(basis, &a, &b).unwrap();
        let u = vec![DVector::from_vec(vec![1.0]); 3];
        let x0 = DVector::from_vec(vec![2.0]);
        let s1 = mc_propagate_linear(&sys, &x0, &u, 100, 9).unwrap();
        let s2 = mc_propagate_linear(&sys, &x0, &u, 100, 9).unwrap();
        assert_eq!(s1, s2);
        let nominal = [2.0, 2.0, 2.0, 2.0];
        for (k, m) in nominal.iter().enumerate() {
            assert!((s1.mean[k][0] - m).abs() < 1e-12);
            assert!(s1.variance[k][0] < 1e-24);
        }
    }
}
