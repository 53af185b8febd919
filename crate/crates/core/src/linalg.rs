//! Small dense row-major matrices and vectors.
//!
//! Everything in this crate is at most a few dozen entries per side, so the
//! kernels are plain loops. The one non-trivial routine is the largest
//! singular value, estimated by power iteration on `MᵀM`.

use std::fmt;
use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};

pub const DEFAULT_SIGMA_TOL: f64 = 1e-10;
pub const DEFAULT_SIGMA_MAX_ITERS: usize = 1000;

/// Dense real vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Vector(data)
    }

    pub fn basis(len: usize, j: usize) -> Self {
        let mut v = Self::zeros(len);
        v.0[j] = 1.0;
        v
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::shape("dot", self.len(), other.len()));
        }
        Ok(dot(self, other))
    }

    pub fn l2_norm(&self) -> f64 {
        l2_norm(self)
    }

    pub fn norm_sq(&self) -> f64 {
        dot(self, self)
    }

    pub fn add(&self, other: &Vector) -> Result<Vector> {
        self.zip_with(other, "vector add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector> {
        self.zip_with(other, "vector sub", |a, b| a - b)
    }

    pub fn scaled(&self, c: f64) -> Vector {
        Vector(self.0.iter().map(|a| a * c).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|a| a.is_finite())
    }

    fn zip_with(&self, other: &Vector, context: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vector> {
        if self.len() != other.len() {
            return Err(Error::shape(context, self.len(), other.len()));
        }
        Ok(Vector(self.iter().zip(other.iter()).map(|(&a, &b)| f(a, b)).collect()))
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Vector(data)
    }
}

impl<const N: usize> From<[f64; N]> for Vector {
    fn from(data: [f64; N]) -> Self {
        Vector(data.to_vec())
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(entries: &[f64]) -> Self {
        let n = entries.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in entries.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("matrix data", rows * cols, data.len()));
        }
        if data.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidArgument("matrix entries must be finite".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape("matrix rows", cols, bad.len()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vector {
        Vector((0..self.rows).map(|i| self.get(i, j)).collect())
    }

    pub fn scaled(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| a * c).collect(),
        }
    }

    pub fn scale_in_place(&mut self, c: f64) {
        self.data.iter_mut().for_each(|a| *a *= c);
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.get(i, j);
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("lhs {}x{} cols == rhs rows", self.rows, self.cols),
                format!("rhs {}x{}", other.rows, other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vector> {
        if self.cols != v.len() {
            return Err(Error::shape(
                "matvec",
                format!("vector of len {} for {}x{} matrix", self.cols, self.rows, self.cols),
                format!("len {}", v.len()),
            ));
        }
        let mut out = Vector::zeros(self.rows);
        self.matvec_into(v, &mut out);
        Ok(out)
    }

    /// `out = self · v` without shape checks beyond debug assertions.
    pub(crate) fn matvec_into(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(self.cols, v.len());
        debug_assert_eq!(self.rows, out.len());
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols.max(1))) {
            *o = dot(row, v);
        }
    }

    /// `out = selfᵀ · v`.
    pub(crate) fn transpose_matvec_into(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(self.rows, v.len());
        debug_assert_eq!(self.cols, out.len());
        out.iter_mut().for_each(|o| *o = 0.0);
        for (&vi, row) in v.iter().zip(self.data.chunks_exact(self.cols.max(1))) {
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w * vi;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }

    /// Largest singular value by power iteration on `MᵀM`.
    ///
    /// The iteration starts from the normalized all-ones vector. Because that
    /// vector can be an exact eigenvector of `MᵀM` for a non-dominant
    /// eigenvalue (or lie in the null space), a second run starts from a fixed
    /// aperiodic vector and the larger Rayleigh estimate wins. Both starts are
    /// constants, so the result is reproducible.
    pub fn max_singular_value(&self, tol: f64, max_iters: usize) -> Result<SingularValue> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidArgument("singular value of an empty matrix".into()));
        }
        if !(tol > 0.0) {
            return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
        }
        let n = self.cols;
        let ones = vec![1.0; n];
        let aperiodic: Vec<f64> = (0..n).map(|j| 0.5 + ((j as f64 + 1.0) * GOLDEN).fract()).collect();

        let a = self.power_iterate(ones, tol, max_iters);
        let b = self.power_iterate(aperiodic, tol, max_iters);
        let best = if b.0 > a.0 { b } else { a };
        Ok(SingularValue {
            value: best.0.max(0.0).sqrt(),
            iterations: a.1 + b.1,
            converged: a.2 && b.2,
        })
    }

    pub fn spectral_norm(&self) -> Result<f64> {
        Ok(self.max_singular_value(DEFAULT_SIGMA_TOL, DEFAULT_SIGMA_MAX_ITERS)?.value)
    }

    /// Returns (eigenvalue estimate of MᵀM, iterations, converged).
    fn power_iterate(&self, start: Vec<f64>, tol: f64, max_iters: usize) -> (f64, usize, bool) {
        let mut v = start;
        let norm = l2_norm(&v);
        v.iter_mut().for_each(|a| *a /= norm);
        let mut mv = vec![0.0; self.rows];
        let mut w = vec![0.0; self.cols];
        let mut lambda = 0.0;
        for iter in 1..=max_iters {
            self.matvec_into(&v, &mut mv);
            // Rayleigh quotient of MᵀM at the unit vector v.
            let next = dot(&mv, &mv);
            if next == 0.0 {
                return (0.0, iter, true);
            }
            self.transpose_matvec_into(&mv, &mut w);
            let wn = l2_norm(&w);
            for (vi, wi) in v.iter_mut().zip(&w) {
                *vi = wi / wn;
            }
            let done = (next - lambda).abs() <= tol * next;
            lambda = next;
            if done {
                return (lambda, iter, true);
            }
        }
        (lambda, max_iters, false)
    }
}

const GOLDEN: f64 = 0.618_033_988_749_894_9;

impl fmt::Display for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.rows {
            let row: Vec<String> = self.row(i).iter().map(|a| format!("{a:.6}")).collect();
            writeln!(f, "[{}]", row.join(", "))?;
        }
        Ok(())
    }
}

/// Estimate returned by [`Matrix::max_singular_value`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingularValue {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::jacobi_eigenvalues;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn matvec_identity_and_zero() {
        let v = Vector::from([1.0, 2.0, 3.0]);
        assert_eq!(Matrix::identity(3).matvec(&v).unwrap(), v);
        assert_eq!(Matrix::zeros(2, 3).matvec(&v).unwrap(), Vector::zeros(2));
    }

    #[test]
    fn matvec_basis_extracts_column() {
        let m = random_matrix(4, 4, 11);
        for j in 0..4 {
            assert_eq!(m.matvec(&Vector::basis(4, j)).unwrap(), m.column(j));
        }
    }

    #[test]
    fn matvec_shape_error_names_both_shapes() {
        let err = Matrix::zeros(2, 3).matvec(&[1.0, 2.0]).unwrap_err().to_string();
        assert!(err.contains("2x3"), "{err}");
        assert!(err.contains("len 2"), "{err}");
    }

    #[test]
    fn from_vec_rejects_bad_length_and_nan() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn sigma_of_simple_matrices() {
        let s = Matrix::identity(3).max_singular_value(1e-10, 1000).unwrap();
        assert!((s.value - 1.0).abs() < 1e-12 && s.converged);
        let s = Matrix::diag(&[2.0, 0.5]).spectral_norm().unwrap();
        assert!((s - 2.0).abs() < 1e-9, "{s}");
        assert_eq!(Matrix::zeros(3, 2).spectral_norm().unwrap(), 0.0);
    }

    #[test]
    fn sigma_when_ones_is_a_minor_eigenvector() {
        // MᵀM has eigenvector (1,1) with eigenvalue 0.5 and (1,-1) with 8.
        let m = Matrix::from_rows(&[vec![2.0, -2.0], vec![0.5, 0.5]]).unwrap();
        let s = m.spectral_norm().unwrap();
        assert!((s - 8f64.sqrt()).abs() < 1e-8, "{s}");
        // all-ones in the null space
        let m = Matrix::from_rows(&[vec![1.0, -1.0]]).unwrap();
        assert!((m.spectral_norm().unwrap() - 2f64.sqrt()).abs() < 1e-8);
    }

    #[test]
    fn sigma_matches_jacobi_oracle() {
        for seed in 0..5 {
            let m = random_matrix(8, 16, seed);
            let gram = m.transpose().matmul(&m).unwrap();
            let eig = jacobi_eigenvalues(&gram, 1e-14, 200);
            let oracle = eig.iter().cloned().fold(f64::MIN, f64::max).sqrt();
            let est = m.max_singular_value(1e-10, 1000).unwrap();
            assert!(
                ((est.value - oracle) / oracle).abs() < 1e-8,
                "seed {seed}: power {} vs jacobi {oracle}",
                est.value
            );
        }
    }

    #[test]
    fn empty_matrix_or_bad_tol_is_error() {
        assert!(Matrix::zeros(0, 3).max_singular_value(1e-10, 10).is_err());
        assert!(Matrix::identity(2).max_singular_value(0.0, 10).is_err());
    }

    #[test]
    fn l2_norm_cases() {
        assert_eq!(l2_norm(&[0.0, 0.0, 0.0]), 0.0);
        assert_eq!(l2_norm(&[3.0, 4.0]), 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..17).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut acc = 0.0;
        for x in &v {
            acc += x * x;
        }
        assert!((l2_norm(&v) - acc.sqrt()).abs() <= 1e-14 * acc.sqrt());
    }

    proptest! {
        #[test]
        fn sigma_is_absolutely_homogeneous(seed in 0u64..500, c in prop::sample::select(vec![-2.0, 0.5, 3.0])) {
            let m = random_matrix(5, 7, seed);
            let s = m.spectral_norm().unwrap();
            let sc = m.scaled(c).spectral_norm().unwrap();
            prop_assert!((sc - c.abs() * s).abs() <= 1e-8 * sc.max(1e-12));
        }

        #[test]
        fn sigma_bounds_every_gain(seed in 0u64..500, probe in prop::collection::vec(-1.0f64..1.0, 6)) {
            let m = random_matrix(4, 6, seed);
            let vn = l2_norm(&probe);
            prop_assume!(vn > 1e-6);
            let gain = m.matvec(&probe).unwrap().l2_norm() / vn;
            prop_assert!(gain <= m.spectral_norm().unwrap() * (1.0 + 1e-9));
        }

        #[test]
        fn matvec_distributes_over_addition(
            seed in 0u64..500,
            a in prop::collection::vec(-10.0f64..10.0, 5),
            b in prop::collection::vec(-10.0f64..10.0, 5),
        ) {
            let m = random_matrix(3, 5, seed);
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let lhs = m.matvec(&sum).unwrap();
            let rhs = m.matvec(&a).unwrap().add(&m.matvec(&b).unwrap()).unwrap();
            for (l, r) in lhs.iter().zip(rhs.iter()) {
                let scale = l.abs().max(r.abs()).max(1.0);
                prop_assert!((l - r).abs() <= 1e-12 * scale);
            }
        }
    }
}
