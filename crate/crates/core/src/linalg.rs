//! Small dense helpers that nalgebra does not cover the way we need them.

use crate::error::{Error, Result};

pub(crate) const JACOBI_MAX_SWEEPS: usize = 100;
pub(crate) const JACOBI_TOL: f64 = 1e-14;

/// Cyclic Jacobi eigendecomposition of a symmetric matrix stored row-major.
///
/// Returns `(eigenvalues, eigenvectors)` where column `k` of the returned
/// row-major matrix is the eigenvector for `eigenvalues[k]`. Iteration stops
/// when the off-diagonal Frobenius norm drops below `JACOBI_TOL` times the
/// matrix norm.
pub(crate) fn symmetric_jacobi(mut a: Vec<Vec<f64>>) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = a.len();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let scale = a
        .iter()
        .flat_map(|r| r.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);

    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum::<f64>()
            .sqrt();
        if off <= JACOBI_TOL * scale {
            let vals = (0..n).map(|i| a[i][i]).collect();
            return Ok((vals, v));
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p][q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let vkp = row[p];
                    let vkq = row[q];
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(Error::Numerical(format!(
        "Jacobi eigen-iteration did not converge in {JACOBI_MAX_SWEEPS} sweeps"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonalizes_small_symmetric() {
        let a = vec![vec![2.0, 1.0, 0.0], vec![1.0, 2.0, 1.0], vec![0.0, 1.0, 2.0]];
        let (mut vals, _) = symmetric_jacobi(a).unwrap();
        vals.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let s2 = 2f64.sqrt();
        let expect = [2.0 - s2, 2.0, 2.0 + s2];
        for (v, e) in vals.iter().zip(expect) {
            assert!((v - e).abs() < 1e-13);
        }
    }

    #[test]
    fn eigenvectors_are_orthonormal() {
        let a = vec![vec![4.0, 1.0], vec![1.0, 3.0]];
        let (_, v) = symmetric_jacobi(a).unwrap();
        let dot = v[0][0] * v[0][1] + v[1][0] * v[1][1];
        let n0 = v[0][0].powi(2) + v[1][0].powi(2);
        assert!(dot.abs() < 1e-14);
        assert!((n0 - 1.0).abs() < 1e-14);
    }
}
