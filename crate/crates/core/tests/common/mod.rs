#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use polychaos::chance::{boole_allocate, Polytope};
use polychaos::multibasis::TotalDegreeBasis;
use polychaos::pce::PceVector;
use polychaos::propagate::ParametricLinearSystem;
use polychaos::smpc::{lqr_gain, InputBox, Policy, SmpcProblem};
use polychaos::MeasureDescriptor;

/// Damped oscillator with uniform stiffness `k ∈ [0.5, 1.5]` and damping
/// `c ∈ [0.1, 0.5]`, sampled at `0.1`:
/// `A = [[1, 0.1], [−0.1k, 1 − 0.1c]]`, `B = [0, 0.1]ᵀ`.
pub fn testbed_system(d: usize) -> ParametricLinearSystem {
    let basis = Arc::new(
        TotalDegreeBasis::from_measures(
            &[
                MeasureDescriptor::Uniform { lo: 0.5, hi: 1.5 },
                MeasureDescriptor::Uniform { lo: 0.1, hi: 0.5 },
            ],
            d,
        )
        .unwrap(),
    );
    let k = PceVector::parameter(basis.clone(), 0).unwrap();
    let c = PceVector::parameter(basis.clone(), 1).unwrap();
    let mut a = DMatrix::zeros(4, basis.len());
    a[(0, 0)] = 1.0;
    a[(1, 0)] = 0.1;
    a.set_row(2, &(k.coeffs().row(0) * -0.1));
    a.set_row(3, &(c.coeffs().row(0) * -0.1));
    a[(3, 0)] += 1.0;
    let mut b = DMatrix::zeros(2, basis.len());
    b[(1, 0)] = 0.1;
    ParametricLinearSystem::new(
        2,
        1,
        PceVector::new(basis.clone(), a).unwrap(),
        PceVector::new(basis, b).unwrap(),
    )
    .unwrap()
}

/// Velocity limits `|x₂| ≤ 0.6`, input box `|u| ≤ 5`, LQR terminal weight
/// and prestabilizing gain from the mean system.
pub fn testbed_problem(sys: &ParametricLinearSystem, horizon: usize, beta: f64) -> SmpcProblem {
    let (am, bm) = sys.mean_matrices();
    let q = DMatrix::identity(2, 2);
    let r = DMatrix::from_element(1, 1, 0.1);
    let lqr = lqr_gain(&am, &bm, &q, &r).unwrap();
    let g = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, -1.0]);
    let poly = Polytope::new(g, DVector::from_vec(vec![0.6, 0.6])).unwrap();
    SmpcProblem {
        horizon,
        q,
        r,
        terminal: lqr.cost_to_go,
        input_box: Some(InputBox {
            lower: DVector::from_element(1, -5.0),
            upper: DVector::from_element(1, 5.0),
        }),
        state_constraints: Some(poly),
        chance: Some(boole_allocate(beta, 2).unwrap()),
        policy: Policy::Prestabilized { gain: lqr.gain },
    }
}

pub fn testbed_x0() -> DVector<f64> {
    DVector::from_vec(vec![2.0, 0.0])
}
