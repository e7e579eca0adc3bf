#![allow(clippy::needless_range_loop)]

mod common;

use std::sync::Arc;

use common::*;
use nalgebra::{DMatrix, DVector};
use polychaos::multibasis::TotalDegreeBasis;
use polychaos::pce::PceVector;
use polychaos::propagate::{dirac_state, expand_linear, monte_carlo, ParametricLinearSystem};
use polychaos::smpc::{
    build_surrogate, expected_quadratic, receding_horizon, solve_cone, InputBox, Policy, SmpcController, SmpcProblem,
    SolveStatus, SolverSettings, SurrogateBuilder,
};
use polychaos::MeasureDescriptor;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Total deterministic cost `Σ_{k<N} xᵀQx + uᵀRu + x_Nᵀ P x_N` by simulation.
fn rollout_cost(a: &DMatrix<f64>, b: &DMatrix<f64>, prob: &SmpcProblem, x0: &DVector<f64>, u: &[f64]) -> f64 {
    let nu = b.ncols();
    let mut x = x0.clone();
    let mut cost = 0.0;
    for k in 0..prob.horizon {
        let uk = DVector::from_column_slice(&u[k * nu..(k + 1) * nu]);
        cost += x.dot(&(&prob.q * &x)) + uk.dot(&(&prob.r * &uk));
        x = a * &x + b * uk;
    }
    cost + x.dot(&(&prob.terminal * &x))
}

/// Condenses the deterministic MPC QP by probing the rollout cost, which is
/// exactly quadratic in the inputs.
fn probe_qp(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    prob: &SmpcProblem,
    x0: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>, f64) {
    let n = prob.horizon * b.ncols();
    let j = |u: &[f64]| rollout_cost(a, b, prob, x0, u);
    let zero = vec![0.0; n];
    let c = j(&zero);
    let unit = |i: usize| {
        let mut e = zero.clone();
        e[i] = 1.0;
        e
    };
    let ji: Vec<f64> = (0..n).map(|i| j(&unit(i))).collect();
    let mut h = DMatrix::zeros(n, n);
    for p in 0..n {
        for q in 0..n {
            let mut e = unit(p);
            e[q] += 1.0;
            h[(p, q)] = if p == q {
                2.0 * (ji[p] - c)
            } else {
                j(&e) - ji[p] - ji[q] + c
            };
        }
    }
    // J(u) = ½uᵀHu + fᵀu + c
    for p in 0..n {
        h[(p, p)] = j(&{
            let mut e = unit(p);
            e[p] = 2.0;
            e
        }) - 2.0 * ji[p]
            + c;
    }
    let f = DVector::from_fn(n, |p, _| ji[p] - c - 0.5 * h[(p, p)]);
    (h, f, c)
}

/// Projected gradient on `½uᵀHu + fᵀu` over a box.
fn projected_gradient(h: &DMatrix<f64>, f: &DVector<f64>, lo: f64, hi: f64) -> DVector<f64> {
    let step = 1.0 / h.clone().symmetric_eigen().eigenvalues.max();
    let mut u = DVector::zeros(f.len());
    for _ in 0..2_000_000 {
        let g = h * &u + f;
        let next = (&u - g * step).map(|v| v.clamp(lo, hi));
        let moved = (&next - &u).amax();
        u = next;
        if moved < 1e-14 {
            break;
        }
    }
    u
}

fn deterministic_testbed(box_half: f64) -> (ParametricLinearSystem, SmpcProblem, DMatrix<f64>, DMatrix<f64>) {
    let random = testbed_system(2);
    let (am, bm) = random.mean_matrices();
    let sys = ParametricLinearSystem::deterministic(random.basis().clone(), &am, &bm).unwrap();
    let mut prob = testbed_problem(&random, 8, 0.9);
    prob.state_constraints = None;
    prob.chance = None;
    prob.input_box = Some(InputBox {
        lower: DVector::from_element(1, -box_half),
        upper: DVector::from_element(1, box_half),
    });
    (sys, prob, am, bm)
}

#[test]
fn zero_uncertainty_surrogate_equals_condensed_qp() {
    let (sys, prob, am, bm) = deterministic_testbed(1.0);
    let exp = expand_linear(&sys, &sys.basis().triple_products().unwrap()).unwrap();
    let x0 = DVector::from_vec(vec![1.5, -0.3]);
    let cp = build_surrogate(&prob, &exp, &dirac_state(&x0, sys.basis().len())).unwrap();
    let (h, f, c) = probe_qp(&am, &bm, &prob, &x0);
    let scale = h.amax();
    assert!(
        (&cp.hessian - &h).amax() < 1e-9 * scale,
        "{}",
        (&cp.hessian - &h).amax()
    );
    assert!((&cp.linear - &f).amax() < 1e-9 * scale);
    assert!((cp.constant - c).abs() < 1e-9 * scale);
}

#[test]
fn certainty_equivalence_closed_loop() {
    let (sys, prob, am, bm) = deterministic_testbed(1.0);
    let t = sys.basis().triple_products().unwrap();
    let ctl = SmpcController::new(prob.clone(), sys, &t, SolverSettings::default()).unwrap();
    let x0 = testbed_x0();
    let trace = ctl.run(&x0, 20, 5).unwrap();
    let mut x = x0;
    let mut active = 0;
    for step in &trace.steps {
        let (h, f, _) = probe_qp(&am, &bm, &prob, &x);
        let u = projected_gradient(&h, &f, -1.0, 1.0);
        if u[0].abs() > 1.0 - 1e-9 {
            active += 1;
        }
        assert!(
            (step.input[0] - u[0]).abs() < 1e-6,
            "step {}: {} vs {}",
            step.step,
            step.input[0],
            u[0]
        );
        assert_eq!(step.status, SolveStatus::Optimal);
        x = &am * &x + &bm * u.rows(0, 1);
    }
    assert!(active > 0, "input box never active; test is not exercising constraints");
}

#[test]
fn surrogate_solutions_satisfy_every_row() {
    let sys = testbed_system(2);
    let exp = expand_linear(&sys, &sys.basis().triple_products().unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut solved = 0;
    let mut attempts = 0;
    while solved < 100 {
        attempts += 1;
        assert!(attempts <= 300, "too few feasible instances");
        let beta = rng.random_range(0.8..0.97);
        let mut prob = testbed_problem(&sys, 6, beta);
        if rng.random::<bool>() {
            prob.policy = Policy::OpenLoop;
        }
        let x0 = DVector::from_vec(vec![rng.random_range(-2.0..2.0), rng.random_range(-0.3..0.3)]);
        let cp = build_surrogate(&prob, &exp, &dirac_state(&x0, sys.basis().len())).unwrap();
        let sol = solve_cone(&cp, 1e-8, 50_000).unwrap();
        // open-loop variance growth makes some draws genuinely infeasible
        assert_ne!(sol.status, SolveStatus::MaxIter);
        if sol.status != SolveStatus::Optimal {
            continue;
        }
        solved += 1;
        for c in &cp.cones {
            assert!(c.residual(&sol.x) <= 1e-6, "cone residual {}", c.residual(&sol.x));
        }
        for i in 0..sol.x.len() {
            assert!(sol.x[i] >= cp.lower[i] - 1e-6 && sol.x[i] <= cp.upper[i] + 1e-6);
        }
    }
}

#[test]
fn cone_radii_grow_with_beta() {
    let sys = testbed_system(2);
    let exp = expand_linear(&sys, &sys.basis().triple_products().unwrap()).unwrap();
    let x0 = dirac_state(&testbed_x0(), sys.basis().len());
    let eta = DVector::from_element(8, 0.3);
    let mut last = 0.0;
    for beta in [0.5, 0.8, 0.9, 0.99, 0.999] {
        let cp = build_surrogate(&testbed_problem(&sys, 8, beta), &exp, &x0).unwrap();
        let r: f64 = cp.cones.iter().map(|c| (&c.z_coeff * &eta + &c.z_offset).norm()).sum();
        assert!(r > last, "beta {beta}");
        last = r;
    }
}

#[test]
fn stage_cost_of_unit_coefficients() {
    assert_eq!(
        expected_quadratic(&DVector::from_vec(vec![1.0, 1.0]), &DMatrix::identity(1, 1)),
        2.0
    );
}

#[test]
fn cost_identity_against_monte_carlo() {
    // deterministic A, input gain affine in θ: predicted states are exact
    let basis =
        Arc::new(TotalDegreeBasis::from_measures(&[MeasureDescriptor::Uniform { lo: 0.5, hi: 1.5 }], 2).unwrap());
    let theta = PceVector::parameter(basis.clone(), 0).unwrap();
    let a_det = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, -0.1, 0.97]);
    let mut a = DMatrix::zeros(4, basis.len());
    for r in 0..4 {
        a[(r, 0)] = a_det[(r / 2, r % 2)];
    }
    let mut b = DMatrix::zeros(2, basis.len());
    b.set_row(1, &(theta.coeffs().row(0) * 0.1));
    let sys = ParametricLinearSystem::new(
        2,
        1,
        PceVector::new(basis.clone(), a).unwrap(),
        PceVector::new(basis.clone(), b).unwrap(),
    )
    .unwrap();
    let mut prob = testbed_problem(&testbed_system(2), 6, 0.9);
    prob.policy = Policy::OpenLoop;
    prob.state_constraints = None;
    prob.chance = None;
    let exp = expand_linear(&sys, &basis.triple_products().unwrap()).unwrap();
    let x0 = DVector::from_vec(vec![1.0, 0.5]);
    let cp = build_surrogate(&prob, &exp, &dirac_state(&x0, basis.len())).unwrap();
    let samplers = basis.germ_samplers().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..3 {
        let eta: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
        let predicted = cp.objective(&DVector::from_column_slice(&eta));
        let mc = monte_carlo(&[0.0], 1, 100_000, 31, |r, out| {
            let xi = TotalDegreeBasis::sample_germ(&samplers, r);
            let (a, b) = sys.sample_matrices(&xi)?;
            out[0] = rollout_cost(&a, &b, &prob, &x0, &eta);
            Ok(())
        })
        .unwrap();
        let se = mc.stderr[0][0];
        assert!(
            (predicted - mc.mean[0][0]).abs() <= 4.0 * se,
            "{predicted} vs {} ± {se}",
            mc.mean[0][0]
        );
    }
}

#[test]
fn open_loop_plan_meets_chance_constraints_in_simulation() {
    let sys = testbed_system(3);
    let prob = testbed_problem(&sys, 8, 0.9);
    let exp = expand_linear(&sys, &sys.basis().triple_products().unwrap()).unwrap();
    let builder = SurrogateBuilder::new(&prob, &exp).unwrap();
    let x0 = DVector::from_vec(vec![2.0, -0.4]);
    let x0s = dirac_state(&x0, sys.basis().len());
    let sol = solve_cone(&builder.program(&x0s).unwrap(), 1e-8, 50_000).unwrap();
    assert_eq!(sol.status, SolveStatus::Optimal);
    let means: Vec<DVector<f64>> = builder
        .predict(&x0s, &sol.x)
        .iter()
        .map(|x| x.rows(0, 2).into_owned())
        .collect();
    let Policy::Prestabilized { gain } = &prob.policy else {
        unreachable!()
    };
    let poly = prob.state_constraints.clone().unwrap();
    let samplers = sys.basis().germ_samplers().unwrap();
    let n = 20_000;
    let mut row_ok = [[0usize; 2]; 8];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..n {
        let xi = TotalDegreeBasis::sample_germ(&samplers, &mut rng);
        let (a, b) = sys.sample_matrices(&xi).unwrap();
        let mut x = x0.clone();
        for k in 0..8 {
            let u = DVector::from_element(1, sol.x[k]) - gain * (&x - &means[k]);
            x = &a * &x + &b * u;
            for i in 0..2 {
                if poly.g.row(i).transpose().dot(&x) <= poly.bounds[i] {
                    row_ok[k][i] += 1;
                }
            }
        }
    }
    for (k, rows) in row_ok.iter().enumerate() {
        for (i, &ok) in rows.iter().enumerate() {
            let p = ok as f64 / n as f64;
            let eps = prob.chance.as_ref().unwrap().allocation[i];
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!(p >= 1.0 - eps - 3.0 * se, "step {k} row {i}: {p}");
        }
    }
}

#[test]
fn unconstrained_stable_testbed_norm_decreases() {
    let sys = testbed_system(2);
    let mut prob = testbed_problem(&sys, 8, 0.9);
    prob.state_constraints = None;
    prob.chance = None;
    prob.input_box = None;
    // from rest the velocity build-up raises ‖x‖ for a few steps, so start
    // with the state already moving inward
    let x0 = DVector::from_vec(vec![1.0, -0.5]);
    let trace = receding_horizon(&prob, &sys, &x0, 30, 1).unwrap();
    let norms: Vec<f64> = trace
        .steps
        .iter()
        .map(|s| DVector::from_column_slice(&s.state).norm())
        .collect();
    for w in norms[2..].windows(2) {
        assert!(w[1] < w[0], "{norms:?}");
    }
}

#[test]
fn closed_loop_violation_rate_within_budget() {
    let sys = testbed_system(2);
    let prob = testbed_problem(&sys, 8, 0.9);
    let t = sys.basis().triple_products().unwrap();
    let ctl = SmpcController::new(prob, sys, &t, SolverSettings::default()).unwrap();
    let runs = 100;
    let steps = 30;
    let mut violations = 0;
    for seed in 0..runs {
        let tr = ctl.run(&testbed_x0(), steps, seed).unwrap();
        assert_eq!(tr.steps.len(), steps);
        violations += tr.violations();
    }
    let n = (runs as usize * steps) as f64;
    let rate = violations as f64 / n;
    assert!(rate <= 0.1 + 3.0 * (0.09 / n).sqrt(), "rate {rate}");
}

#[test]
fn same_seed_same_trace() {
    let sys = testbed_system(2);
    let prob = testbed_problem(&sys, 8, 0.9);
    let a = receding_horizon(&prob, &sys, &testbed_x0(), 10, 42).unwrap();
    let b = receding_horizon(&prob, &sys, &testbed_x0(), 10, 42).unwrap();
    let c = receding_horizon(&prob, &sys, &testbed_x0(), 10, 43).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_csv(), b.to_csv());
    assert_ne!(a.germ, c.germ);
}

#[test]
fn infeasible_start_is_reported() {
    let sys = testbed_system(2);
    let prob = testbed_problem(&sys, 8, 0.9);
    // velocity far outside the limit and unreachable in one step
    let r = receding_horizon(&prob, &sys, &DVector::from_vec(vec![0.0, -5.0]), 5, 0);
    assert!(matches!(r, Err(polychaos::Error::InfeasibleAtStart(_))), "{r:?}");
}
