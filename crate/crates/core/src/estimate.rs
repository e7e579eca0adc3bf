//! Bayesian update of a scalar parameter PCE by moment matching.
//!
//! One filter step draws germ samples, weights the parameter values by the
//! measurement likelihood, and refits the expansion coefficients so that the
//! first `M` raw moments match the weighted sample moments. Basis and germ
//! stay fixed; only coefficients change.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multibasis::{TensorRule, TotalDegreeBasis};
use crate::pce::PceVector;
use crate::propagate::sample_rng;

pub const REFIT_TOL: f64 = 1e-10;
pub const REFIT_MAX_ITER: usize = 200;
pub const MAX_MOMENTS: usize = 4;
/// Raw weights all below this mean the measurement is inconsistent with
/// the prior.
pub const COLLAPSE_THRESHOLD: f64 = 1e-300;

type Forward = dyn Fn(f64) -> f64 + Send + Sync;

/// `y = forward(θ) + ς`, `ς ~ N(0, noise_std²)`.
#[derive(Clone)]
pub struct LikelihoodModel {
    forward: Arc<Forward>,
    noise_std: f64,
}

impl fmt::Debug for LikelihoodModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LikelihoodModel")
            .field("noise_std", &self.noise_std)
            .finish_non_exhaustive()
    }
}

impl LikelihoodModel {
    pub fn new(forward: impl Fn(f64) -> f64 + Send + Sync + 'static, noise_std: f64) -> Result<Self> {
        if !(noise_std > 0.0 && noise_std.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise_std = {noise_std} must be positive"
            )));
        }
        Ok(Self {
            forward: Arc::new(forward),
            noise_std,
        })
    }

    /// Direct observation of θ.
    pub fn identity(noise_std: f64) -> Result<Self> {
        Self::new(|t| t, noise_std)
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn predict(&self, theta: f64) -> f64 {
        (self.forward)(theta)
    }

    /// Gaussian density of `y` given `theta`.
    pub fn density(&self, y: f64, theta: f64) -> f64 {
        let r = (y - self.predict(theta)) / self.noise_std;
        (-0.5 * r * r).exp() / (self.noise_std * (2.0 * PI).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentTargets {
    /// `b[m−1]` is the `m`-th weighted raw moment.
    pub b: Vec<f64>,
    pub n_samples: usize,
    /// Kish effective sample size `(Σw)² / Σw²`.
    pub ess: f64,
}

impl MomentTargets {
    pub fn mean(&self) -> f64 {
        self.b[0]
    }

    pub fn variance(&self) -> f64 {
        self.b[1] - self.b[0] * self.b[0]
    }
}

fn scalar_parameter(theta: &PceVector) -> Result<()> {
    if theta.n_out() != 1 {
        return Err(Error::InvalidArgument(format!(
            "parameter expansion must be scalar, got {} outputs",
            theta.n_out()
        )));
    }
    if theta.basis().n_germ() != 1 {
        return Err(Error::InvalidArgument(format!(
            "estimation needs a 1-D basis, got {} germ dimensions",
            theta.basis().n_germ()
        )));
    }
    Ok(())
}

/// Weighted raw moments `b_1..b_M` of the posterior.
///
/// Germ draws are stratified: sample `j` is the germ quantile at
/// `(j + U_j)/K`, which keeps the estimate unbiased and cuts its variance
/// well below plain sampling for smooth integrands.
pub fn posterior_moments(
    theta_pce: &PceVector,
    y: f64,
    lik: &LikelihoodModel,
    m: usize,
    k: usize,
    seed: u64,
) -> Result<MomentTargets> {
    scalar_parameter(theta_pce)?;
    if k < 100 {
        return Err(Error::InvalidArgument(format!("need K ≥ 100 samples, got {k}")));
    }
    if !(2..=MAX_MOMENTS).contains(&m) {
        return Err(Error::InvalidArgument(format!(
            "moment count M = {m} not in 2..={MAX_MOMENTS}"
        )));
    }
    let sampler = theta_pce.basis().germ_samplers()?.remove(0);
    let mut rng = sample_rng(seed, 0);
    let mut thetas = Vec::with_capacity(k);
    let mut weights = Vec::with_capacity(k);
    for j in 0..k {
        let u = (j as f64 + rng.random::<f64>()) / k as f64;
        let xi = sampler.quantile(u.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON));
        let t = theta_pce.sample_eval(&[xi])?[0];
        let w = lik.density(y, t);
        if !w.is_finite() {
            return Err(Error::Numerical(format!("likelihood not finite at θ = {t}")));
        }
        thetas.push(t);
        weights.push(w);
    }
    if weights.iter().all(|&w| w < COLLAPSE_THRESHOLD) {
        return Err(Error::LikelihoodCollapse);
    }
    let total: f64 = weights.iter().sum();
    let sq: f64 = weights.iter().map(|w| w * w).sum();
    let mut b = vec![0.0; m];
    for (t, w) in thetas.iter().zip(&weights) {
        let wn = w / total;
        let mut p = 1.0;
        for bm in b.iter_mut() {
            p *= t;
            *bm += wn * p;
        }
    }
    Ok(MomentTargets {
        b,
        n_samples: k,
        ess: total * total / sq,
    })
}

/// Result of a moment-matching refit.
#[derive(Debug, Clone, PartialEq)]
pub struct Refit {
    pub pce: PceVector,
    pub converged: bool,
    pub iterations: usize,
    /// `max_m |μ_m − b_m|` at the returned coefficients.
    pub residual: f64,
}

struct MomentMap {
    rule: TensorRule,
    /// `Φ` at each rule point.
    phi: Vec<DVector<f64>>,
}

impl MomentMap {
    fn new(basis: &TotalDegreeBasis, m: usize) -> Result<Self> {
        let rule = basis.tensor_rule((m * basis.degree()).max(1))?;
        let phi = rule
            .points
            .iter()
            .map(|p| basis.eval(p).map(DVector::from_vec))
            .collect::<Result<_>>()?;
        Ok(Self { rule, phi })
    }

    /// Raw moments `μ_1..μ_M`; the first two come straight from the
    /// coefficients, higher ones by quadrature.
    fn moments(&self, c: &DVector<f64>, m: usize) -> Vec<f64> {
        let mut mu = vec![c[0], c.norm_squared()];
        for order in 3..=m {
            let v = self
                .phi
                .iter()
                .zip(&self.rule.weights)
                .map(|(p, w)| w * c.dot(p).powi(order as i32))
                .sum();
            mu.push(v);
        }
        mu.truncate(m);
        mu
    }

    fn jacobian(&self, c: &DVector<f64>, m: usize) -> DMatrix<f64> {
        let n = c.len();
        let mut j = DMatrix::zeros(m, n);
        j[(0, 0)] = 1.0;
        for i in 0..n {
            j[(1, i)] = 2.0 * c[i];
        }
        if m > 2 {
            let h = 1e-6 * (1.0 + c.amax());
            for i in 0..n {
                let mut cp = c.clone();
                let mut cm = c.clone();
                cp[i] += h;
                cm[i] -= h;
                let (mp, mm) = (self.moments(&cp, m), self.moments(&cm, m));
                for r in 2..m {
                    j[(r, i)] = (mp[r] - mm[r]) / (2.0 * h);
                }
            }
        }
        j
    }
}

fn residual(mu: &[f64], b: &[f64]) -> DVector<f64> {
    DVector::from_iterator(b.len(), mu.iter().zip(b).map(|(a, b)| a - b))
}

/// Reflects `ξ → −ξ` so that `c_1 ≥ 0`; only meaningful for symmetric germs,
/// where `φ_n(−ξ) = (−1)^n φ_n(ξ)`.
fn canonical_sign(basis: &TotalDegreeBasis, c: &mut DVector<f64>) {
    if !basis.families()[0].measure.is_symmetric() || c.len() < 2 || c[1] >= 0.0 {
        return;
    }
    for (i, idx) in basis.indices().iter().enumerate() {
        if idx.0[0] % 2 == 1 {
            c[i] = -c[i];
        }
    }
}

/// Gauss-Newton fit of the coefficients to the moment targets.
///
/// Returns the best iterate found; `converged` is false if the iteration
/// cap was reached first.
pub fn refit_pce(basis: &Arc<TotalDegreeBasis>, targets: &MomentTargets, init: &PceVector) -> Result<Refit> {
    scalar_parameter(init)?;
    if !init.same_basis(&PceVector::zeros(basis.clone(), 1)) {
        return Err(Error::BasisMismatch);
    }
    let m = targets.b.len();
    if !(2..=MAX_MOMENTS).contains(&m) {
        return Err(Error::InvalidArgument(format!(
            "moment count M = {m} not in 2..={MAX_MOMENTS}"
        )));
    }
    if basis.len() > m + 1 {
        return Err(Error::InvalidArgument(format!(
            "{} free coefficients but only {m} moments; need at most M + 1",
            basis.len()
        )));
    }
    if targets.variance() < -1e-12 * targets.b[1].abs().max(1.0) {
        return Err(Error::InvalidArgument(
            "moment targets are not realizable (b₂ < b₁²)".into(),
        ));
    }
    let map = MomentMap::new(basis, m)?;
    let b = &targets.b;
    let scale = b.iter().fold(1.0f64, |s, v| s.max(v.abs()));
    let tol = REFIT_TOL * scale;

    let mut c = init.coeffs().row(0).transpose();
    let mut r = residual(&map.moments(&c, m), b);
    if r.amax() <= tol {
        canonical_sign(basis, &mut c);
        return Ok(Refit {
            pce: PceVector::new(basis.clone(), DMatrix::from_row_slice(1, c.len(), c.as_slice()))?,
            converged: true,
            iterations: 0,
            residual: r.amax(),
        });
    }
    // A degenerate start has zero sensitivity of the variance to the spread.
    if c.len() > 1 && c.rows(1, c.len() - 1).amax() == 0.0 {
        c[1] = targets.variance().max(0.0).sqrt().max(1e-3);
    }

    let mut best = (r.amax(), c.clone());
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=REFIT_MAX_ITER {
        iterations = it;
        let j = map.jacobian(&c, m);
        let step = j
            .svd(true, true)
            .solve(&r, 1e-14)
            .map_err(|e| Error::Numerical(e.to_string()))?;
        // Halve the step until the residual does not grow.
        let mut lambda = 1.0;
        let mut next = &c - &step;
        let mut r_next = residual(&map.moments(&next, m), b);
        while r_next.norm() > r.norm() && lambda > 1e-6 {
            lambda *= 0.5;
            next = &c - &step * lambda;
            r_next = residual(&map.moments(&next, m), b);
        }
        let moved = (&next - &c).amax();
        c = next;
        r = r_next;
        if r.amax() < best.0 {
            best = (r.amax(), c.clone());
        }
        if r.amax() <= tol || moved <= REFIT_TOL * (1.0 + c.amax()) {
            converged = true;
            break;
        }
    }
    let (res, mut c) = if converged { (r.amax(), c) } else { best };
    canonical_sign(basis, &mut c);
    Ok(Refit {
        pce: PceVector::new(basis.clone(), DMatrix::from_row_slice(1, c.len(), c.as_slice()))?,
        converged,
        iterations,
        residual: res,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Number of matched moments.
    pub moments: usize,
    /// Importance samples per step.
    pub samples: usize,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            moments: 2,
            samples: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterUpdate {
    pub posterior: PceVector,
    pub targets: MomentTargets,
    pub converged: bool,
    pub iterations: usize,
}

/// One Bayesian update: weighted moments, then the refit.
pub fn filter_step(
    theta_pce: &PceVector,
    y: f64,
    lik: &LikelihoodModel,
    config: &FilterConfig,
) -> Result<FilterUpdate> {
    let targets = posterior_moments(theta_pce, y, lik, config.moments, config.samples, config.seed)?;
    let refit = refit_pce(theta_pce.basis(), &targets, theta_pce)?;
    Ok(FilterUpdate {
        posterior: refit.pce,
        targets,
        converged: refit.converged,
        iterations: refit.iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRecord {
    pub step: usize,
    pub y: f64,
    pub mean: f64,
    pub variance: f64,
    pub ess: f64,
}

/// Runs [`filter_step`] over a measurement sequence. Step `s` uses seed
/// `config.seed + s`.
pub fn run_filter(
    prior: &PceVector,
    ys: &[f64],
    lik: &LikelihoodModel,
    config: &FilterConfig,
) -> Result<(PceVector, Vec<FilterRecord>)> {
    let mut theta = prior.clone();
    let mut trace = Vec::with_capacity(ys.len());
    for (s, &y) in ys.iter().enumerate() {
        let cfg = FilterConfig {
            seed: config.seed.wrapping_add(s as u64),
            ..*config
        };
        let up = filter_step(&theta, y, lik, &cfg)?;
        theta = up.posterior;
        trace.push(FilterRecord {
            step: s,
            y,
            mean: theta.mean()[0],
            variance: theta.variance()[0],
            ess: up.targets.ess,
        });
    }
    Ok((theta, trace))
}

pub fn filter_trace_csv(trace: &[FilterRecord]) -> String {
    let mut out = String::from("step,y,posterior_mean,posterior_variance,ess\n");
    for r in trace {
        out.push_str(&format!("{},{},{},{},{}\n", r.step, r.y, r.mean, r.variance, r.ess));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orthopoly::MeasureDescriptor;

    fn hermite(d: usize) -> Arc<TotalDegreeBasis> {
        Arc::new(TotalDegreeBasis::from_measures(&[MeasureDescriptor::Gaussian { mean: 0.0, stddev: 1.0 }], d).unwrap())
    }

    fn standard_prior() -> PceVector {
        PceVector::parameter(hermite(1), 0).unwrap()
    }

    #[test]
    fn conjugate_gaussian_moments() {
        let lik = LikelihoodModel::identity(1.0).unwrap();
        let t = posterior_moments(&standard_prior(), 1.0, &lik, 2, 10_000, 7).unwrap();
        assert!((t.mean() - 0.5).abs() < 0.02, "{}", t.mean());
        assert!((t.variance() - 0.5).abs() < 0.03, "{}", t.variance());
        assert!(t.ess > 0.0 && t.ess <= 10_000.0);
    }

    #[test]
    fn flat_likelihood_returns_prior_moments() {
        let lik = LikelihoodModel::new(|_| 3.0, 1.0).unwrap();
        let t = posterior_moments(&standard_prior(), 3.0, &lik, 4, 10_000, 1).unwrap();
        assert!(t.b[0].abs() < 1e-3);
        assert!((t.b[1] - 1.0).abs() < 1e-2);
        assert!((t.b[3] - 3.0).abs() < 0.1);
        assert!((t.ess - 10_000.0).abs() < 1e-6);
    }

    #[test]
    fn tail_measurement_collapses() {
        let lik = LikelihoodModel::identity(1.0).unwrap();
        let r = posterior_moments(&standard_prior(), 100.0, &lik, 2, 1000, 0);
        assert!(matches!(r, Err(Error::LikelihoodCollapse)));
    }

    #[test]
    fn preconditions() {
        let lik = LikelihoodModel::identity(1.0).unwrap();
        assert!(posterior_moments(&standard_prior(), 0.0, &lik, 2, 99, 0).is_err());
        assert!(posterior_moments(&standard_prior(), 0.0, &lik, 1, 100, 0).is_err());
        assert!(LikelihoodModel::identity(0.0).is_err());
    }

    #[test]
    fn refit_closed_form() {
        let basis = hermite(1);
        let targets = MomentTargets {
            b: vec![0.5, 0.5 * 0.5 + 0.25],
            n_samples: 0,
            ess: 0.0,
        };
        let r = refit_pce(&basis, &targets, &standard_prior()).unwrap();
        assert!(r.converged);
        let c = r.pce.coeffs();
        assert!((c[(0, 0)] - 0.5).abs() < 1e-10);
        assert!((c[(0, 1)] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn refit_flips_negative_spread() {
        let basis = hermite(1);
        let init = PceVector::new(basis.clone(), DMatrix::from_row_slice(1, 2, &[0.0, -1.0])).unwrap();
        let targets = MomentTargets {
            b: vec![1.0, 1.0 + 4.0],
            n_samples: 0,
            ess: 0.0,
        };
        let r = refit_pce(&basis, &targets, &init).unwrap();
        assert!((r.pce.coeffs()[(0, 1)] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn refit_at_optimum_takes_no_iterations() {
        let prior = PceVector::new(hermite(1), DMatrix::from_row_slice(1, 2, &[0.3, 0.7])).unwrap();
        let targets = MomentTargets {
            b: vec![0.3, 0.09 + 0.49],
            n_samples: 0,
            ess: 0.0,
        };
        let r = refit_pce(prior.basis(), &targets, &prior).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.pce, prior);
    }

    #[test]
    fn refit_three_moments_quadratic_basis() {
        // θ = 1 + 0.5 ξ + 0.2 φ_2(ξ): raw moments from quadrature
        let basis = hermite(2);
        let truth = PceVector::new(basis.clone(), DMatrix::from_row_slice(1, 3, &[1.0, 0.5, 0.2])).unwrap();
        let rule = basis.tensor_rule(6).unwrap();
        let b: Vec<f64> = (1..=3).map(|m| truth.raw_moment(m, &rule).unwrap()[0]).collect();
        let init = PceVector::new(basis.clone(), DMatrix::from_row_slice(1, 3, &[0.8, 0.6, 0.1])).unwrap();
        let r = refit_pce(
            &basis,
            &MomentTargets {
                b: b.clone(),
                n_samples: 0,
                ess: 0.0,
            },
            &init,
        )
        .unwrap();
        assert!(r.converged);
        let got: Vec<f64> = (1..=3).map(|m| r.pce.raw_moment(m, &rule).unwrap()[0]).collect();
        for (g, w) in got.iter().zip(&b) {
            assert!((g - w).abs() < 1e-8, "{got:?} vs {b:?}");
        }
    }

    #[test]
    fn uninformative_measurement_keeps_prior() {
        let lik = LikelihoodModel::identity(1e6).unwrap();
        let prior = standard_prior();
        let up = filter_step(&prior, 0.4, &lik, &FilterConfig::default()).unwrap();
        assert!((up.posterior.coeffs() - prior.coeffs()).amax() < 1e-3);
    }

    #[test]
    fn trace_csv_header() {
        let csv = filter_trace_csv(&[FilterRecord {
            step: 0,
            y: 1.0,
            mean: 0.5,
            variance: 0.5,
            ess: 10.0,
        }]);
        assert!(csv.starts_with("step,y,posterior_mean,posterior_variance,ess\n0,1,0.5,0.5,10\n"));
    }
}
