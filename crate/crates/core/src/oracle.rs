//! Independent reference computations used by the self-checks and tests.
//!
//! Nothing here shares code paths with the routines it validates: the
//! eigenvalues come from cyclic Jacobi rotations rather than power iteration,
//! and derivatives come from central differences rather than backprop or the
//! chain-rule recursion.

use crate::linalg::Matrix;

/// All eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
///
/// Sweeps stop once the off-diagonal Frobenius mass falls below
/// `tol × ‖A‖_F` or after `max_sweeps`.
pub fn jacobi_eigenvalues(sym: &Matrix, tol: f64, max_sweeps: usize) -> Vec<f64> {
    assert_eq!(sym.rows(), sym.cols(), "jacobi needs a square matrix");
    let n = sym.rows();
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| sym.row(i).to_vec()).collect();
    let total: f64 = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..max_sweeps {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum::<f64>()
            .sqrt();
        if off <= tol * total.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
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
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

/// Largest singular value of `m` via Jacobi on `mᵀm`.
pub fn jacobi_max_singular_value(m: &Matrix) -> f64 {
    let gram = m.transpose().matmul(m).expect("square gram");
    jacobi_eigenvalues(&gram, 1e-15, 100)
        .into_iter()
        .fold(0.0, f64::max)
        .sqrt()
}

/// Central-difference partial derivatives of a scalar function.
pub fn central_gradient(f: impl Fn(&[f64]) -> f64, point: &[f64], h: f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + h;
            let plus = f(&x);
            x[i] = point[i] - h;
            let minus = f(&x);
            x[i] = point[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Central-difference derivative of a vector-valued curve `g(t)`.
pub fn central_derivative(g: impl Fn(f64) -> Vec<f64>, t: f64, h: f64) -> Vec<f64> {
    let plus = g(t + h);
    let minus = g(t - h);
    plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * h)).collect()
}

/// `|a − b| ≤ rel·max(|a|, |b|)` or `|a − b| ≤ abs_floor`.
pub fn close(a: f64, b: f64, rel: f64, abs_floor: f64) -> bool {
    let diff = (a - b).abs();
    diff <= abs_floor || diff <= rel * a.abs().max(b.abs())
}
