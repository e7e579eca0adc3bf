use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use polychaos::multibasis::TotalDegreeBasis;
use polychaos::pce::PceVector;
use polychaos::propagate::{
    dirac_state, expand_linear, mc_propagate_decay, mc_propagate_linear, unstack, GalerkinOde, ParametricLinearSystem,
    DEFAULT_DT,
};
use polychaos::MeasureDescriptor;

fn exact_decay_moments(t: f64) -> (f64, f64) {
    // θ ~ U[0.5, 1.5]: E[e^{−θt}] = (e^{−0.5t} − e^{−1.5t}) / t
    let m1 = ((-0.5 * t).exp() - (-1.5 * t).exp()) / t;
    let m2 = ((-t).exp() - (-3.0 * t).exp()) / (2.0 * t);
    (m1, m2 - m1 * m1)
}

fn decay_at_one(d: usize, dt: f64) -> (f64, f64) {
    let basis =
        Arc::new(TotalDegreeBasis::from_measures(&[MeasureDescriptor::Uniform { lo: 0.5, hi: 1.5 }], d).unwrap());
    let rate = PceVector::parameter(basis.clone(), 0).unwrap();
    let t = basis.triple_products().unwrap();
    let ode = GalerkinOde::new(rate, &t).unwrap();
    let a0 = PceVector::constant(basis.clone(), &[1.0]);
    let out = ode.integrate(a0.coeffs(), &[1.0], dt).unwrap();
    let y = PceVector::new(basis, out[0].clone()).unwrap();
    (y.mean()[0], y.variance()[0])
}

#[test]
fn analytic_oracle_values() {
    let (m, v) = exact_decay_moments(1.0);
    assert!((m - 0.3834005).abs() < 5e-8);
    // the commonly quoted 0.0120497 is a rounding slip of 0.01205024
    assert!((v - 0.01205024).abs() < 5e-9);
    assert!((v - 0.0120497).abs() < 1e-5);
}

#[test]
fn decay_galerkin_matches_analytic() {
    let (m, v) = decay_at_one(6, DEFAULT_DT);
    let (me, ve) = exact_decay_moments(1.0);
    assert!((m - me).abs() < 1e-6, "mean {m} vs {me}");
    assert!((v - ve).abs() < 1e-5, "variance {v} vs {ve}");
}

#[test]
fn decay_error_decreases_with_degree() {
    let (me, ve) = exact_decay_moments(1.0);
    let errs: Vec<f64> = [2, 4, 6]
        .iter()
        .map(|&d| {
            let (m, v) = decay_at_one(d, DEFAULT_DT);
            (m - me).abs() + (v - ve).abs()
        })
        .collect();
    assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
}

#[test]
fn decay_monte_carlo_agrees() {
    let basis =
        Arc::new(TotalDegreeBasis::from_measures(&[MeasureDescriptor::Uniform { lo: 0.5, hi: 1.5 }], 6).unwrap());
    let rate = PceVector::parameter(basis, 0).unwrap();
    let mc = mc_propagate_decay(&rate, &[1.0], &[0.0, 0.5, 1.0], 100_000, 2024).unwrap();
    for (k, &t) in [0.0, 0.5, 1.0].iter().enumerate() {
        let (me, ve) = if t == 0.0 { (1.0, 0.0) } else { exact_decay_moments(t) };
        let se = mc.stderr[k][0];
        assert!((mc.mean[k][0] - me).abs() <= 4.0 * se + 1e-15, "t={t}");
        let vse = mc.variance_stderr(k, 0);
        assert!((mc.variance[k][0] - ve).abs() <= 4.0 * vse + 1e-15, "t={t}");
    }
}

#[test]
fn rk4_fourth_order() {
    let reference = decay_at_one(4, 1e-3).0;
    let coarse = (decay_at_one(4, 0.1).0 - reference).abs();
    let fine = (decay_at_one(4, 0.05).0 - reference).abs();
    let ratio = coarse / fine;
    assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
}

fn gaussian_basis(mu: f64, sigma: f64, d: usize) -> Arc<TotalDegreeBasis> {
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

#[test]
fn galerkin_exact_for_polynomial_states() {
    // x_{k+1} = θ x_k, θ ~ N(μ, σ²): x_k = θ^k exactly representable for k ≤ d
    let (mu, s) = (1.0f64, 0.1f64);
    let raw = [
        1.0,
        mu,
        mu * mu + s * s,
        mu.powi(3) + 3.0 * mu * s * s,
        mu.powi(4) + 6.0 * mu * mu * s * s + 3.0 * s.powi(4),
        mu.powi(5) + 10.0 * mu.powi(3) * s * s + 15.0 * mu * s.powi(4),
        mu.powi(6) + 15.0 * mu.powi(4) * s * s + 45.0 * mu * mu * s.powi(4) + 15.0 * s.powi(6),
    ];
    let d = 3;
    let basis = gaussian_basis(mu, s, d);
    let a = PceVector::parameter(basis.clone(), 0).unwrap();
    let b = PceVector::constant(basis.clone(), &[0.0]);
    let sys = ParametricLinearSystem::new(1, 1, a, b).unwrap();
    let exp = expand_linear(&sys, &basis.triple_products().unwrap()).unwrap();
    let mut x = dirac_state(&DVector::from_element(1, 1.0), basis.len());
    let u = DVector::zeros(1);
    for k in 1..=d {
        x = exp.step(&x, &u).unwrap();
        let p = unstack(&x, basis.clone()).unwrap();
        let mean = raw[k];
        let var = raw[2 * k] - mean * mean;
        assert!((p.mean()[0] - mean).abs() < 1e-12, "k={k}");
        assert!((p.variance()[0] - var).abs() < 1e-12, "k={k}");
    }
}

#[test]
fn galerkin_matches_monte_carlo_for_affine_input_gain() {
    let basis = gaussian_basis(1.0, 0.2, 2);
    let theta = PceVector::parameter(basis.clone(), 0).unwrap();
    let nb = basis.len();
    let a_det = [0.9, 0.1, -0.1, 0.8];
    let mut a = DMatrix::zeros(4, nb);
    for (r, v) in a_det.iter().enumerate() {
        a[(r, 0)] = *v;
    }
    let mut b = DMatrix::zeros(2, nb);
    b.set_row(1, &(theta.coeffs().row(0) * 0.5));
    let sys = ParametricLinearSystem::new(
        2,
        1,
        PceVector::new(basis.clone(), a).unwrap(),
        PceVector::new(basis.clone(), b).unwrap(),
    )
    .unwrap();
    let exp = expand_linear(&sys, &basis.triple_products().unwrap()).unwrap();
    let x0 = DVector::from_vec(vec![1.0, -0.5]);
    let inputs: Vec<DVector<f64>> = (0..6).map(|k| DVector::from_element(1, (k as f64).sin())).collect();
    let mc = mc_propagate_linear(&sys, &x0, &inputs, 100_000, 11).unwrap();
    let mut x = dirac_state(&x0, nb);
    for (k, u) in inputs.iter().enumerate() {
        x = exp.step(&x, u).unwrap();
        let p = unstack(&x, basis.clone()).unwrap();
        for r in 0..2 {
            let se = mc.stderr[k + 1][r];
            assert!(
                (p.mean()[r] - mc.mean[k + 1][r]).abs() <= 4.0 * se + 1e-14,
                "k={k} r={r}"
            );
            let vse = mc.variance_stderr(k + 1, r);
            assert!(
                (p.variance()[r] - mc.variance[k + 1][r]).abs() <= 4.0 * vse + 1e-14,
                "k={k} r={r}"
            );
        }
    }
}

#[test]
fn monte_carlo_is_seed_deterministic() {
    let basis =
        Arc::new(TotalDegreeBasis::from_measures(&[MeasureDescriptor::Uniform { lo: 0.5, hi: 1.5 }], 2).unwrap());
    let rate = PceVector::parameter(basis, 0).unwrap();
    let a = mc_propagate_decay(&rate, &[1.0], &[1.0], 5000, 3).unwrap();
    let b = mc_propagate_decay(&rate, &[1.0], &[1.0], 5000, 3).unwrap();
    let c = mc_propagate_decay(&rate, &[1.0], &[1.0], 5000, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.mean, c.mean);
}
