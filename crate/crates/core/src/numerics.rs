//! Dense linear algebra and seeded randomness.
//!
//! Everything here is `f64`, row-major and small: the matrices that show up
//! are layer weights, KFAC factors and per-layer covariances.

use std::fmt;
use std::ops::{Deref, DerefMut, Index, IndexMut};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative asymmetry accepted by [`sym_eig`].
pub const SYMMETRY_TOL: f64 = 1e-10;

/// A dense real vector.
#[derive(Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        Vector(data)
    }

    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Vector(vec![value; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn norm(&self) -> f64 {
        self.dot(&self.0).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }
}

impl Deref for Vector {
    type Target = Vec<f64>;
    fn deref(&self) -> &Vec<f64> {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut Vec<f64> {
        &mut self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl From<&[f64]> for Vector {
    fn from(v: &[f64]) -> Self {
        Vector(v.to_vec())
    }
}

impl FromIterator<f64> for Vector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Vector(iter.into_iter().collect())
    }
}

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::structural(format!(
                "matrix data has {} entries, expected {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numerical(format!("non-finite matrix entry at {bad}")));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Matrix::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::structural("ragged matrix rows"));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn diag(&self) -> Vector {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * x`.
    pub fn matvec(&self, x: &[f64]) -> Vector {
        assert_eq!(self.cols, x.len(), "matvec dimension mismatch");
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `selfᵀ * x`.
    pub fn matvec_t(&self, x: &[f64]) -> Vector {
        assert_eq!(self.rows, x.len(), "matvec_t dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            for (o, &v) in out.iter_mut().zip(self.row(r)) {
                *o += v * xr;
            }
        }
        Vector(out)
    }

    /// `A S Aᵀ` for a square `S`.
    pub fn sandwich(&self, s: &Matrix) -> Matrix {
        self.matmul(s).matmul(&self.transpose())
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_diag(&self, value: f64) -> Matrix {
        let mut m = self.clone();
        for i in 0..self.rows.min(self.cols) {
            m[(i, i)] += value;
        }
        m
    }

    /// Kronecker product `self ⊗ other`.
    pub fn kron(&self, other: &Matrix) -> Matrix {
        let (p, q) = (other.rows, other.cols);
        Matrix::from_fn(self.rows * p, self.cols * q, |r, c| {
            self[(r / p, c / q)] * other[(r % p, c % q)]
        })
    }

    pub fn submatrix(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Matrix {
        Matrix::from_fn(r1 - r0, c1 - c0, |r, c| self[(r0 + r, c0 + c)])
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Relative Frobenius distance `‖self − other‖ / max(‖other‖, tiny)`.
    pub fn rel_diff(&self, other: &Matrix) -> f64 {
        self.sub(other).frobenius() / other.frobenius().max(f64::MIN_POSITIVE)
    }

    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        (0..self.rows).all(|r| {
            (0..r).all(|c| (self[(r, c)] - self[(c, r)]).abs() <= rel_tol * scale)
        })
    }

    /// Replace with `(M + Mᵀ)/2`.
    pub fn symmetrize(&mut self) {
        for r in 0..self.rows {
            for c in 0..r {
                let v = 0.5 * (self[(r, c)] + self[(c, r)]);
                self[(r, c)] = v;
                self[(c, r)] = v;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching orthonormal
/// eigenvectors as columns, so `m = V diag(λ) Vᵀ`.
pub fn sym_eig(m: &Matrix) -> Result<(Vector, Matrix)> {
    if !m.is_square() {
        return Err(Error::structural(format!(
            "sym_eig needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_symmetric(SYMMETRY_TOL) {
        return Err(Error::structural("sym_eig input is not symmetric"));
    }
    let n = m.rows();
    let mut a = m.clone();
    a.symmetrize();
    let mut v = Matrix::identity(n);
    let total = a.frobenius();

    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|r| (0..n).filter(move |&c| c != r).map(move |c| (r, c)))
            .map(|(r, c)| a[(r, c)] * a[(r, c)])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok((values, vectors))
}

/// Rebuild `V diag(λ) Vᵀ`.
pub fn from_eig(values: &[f64], vectors: &Matrix) -> Matrix {
    let n = values.len();
    let mut out = Matrix::zeros(n, n);
    for r in 0..n {
        for c in 0..=r {
            let s: f64 = (0..n).map(|k| vectors[(r, k)] * values[k] * vectors[(c, k)]).sum();
            out[(r, c)] = s;
            out[(c, r)] = s;
        }
    }
    out
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = m`.
pub fn cholesky(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::structural("cholesky needs a square matrix"));
    }
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let s = m[(j, j)] - dot(&l.row(j)[..j], &l.row(j)[..j]);
        if s <= 0.0 || !s.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: s });
        }
        let d = s.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let s = m[(i, j)] - dot(&l.row(i)[..j], &l.row(j)[..j]);
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Inverse of a symmetric positive definite matrix through its Cholesky factor.
pub fn inverse_spd(m: &Matrix) -> Result<Matrix> {
    let l = cholesky(m)?;
    let n = m.rows();
    // L⁻¹ by forward substitution, then (L⁻¹)ᵀ L⁻¹.
    let mut linv = Matrix::zeros(n, n);
    for c in 0..n {
        for r in c..n {
            let mut s = if r == c { 1.0 } else { 0.0 };
            for k in c..r {
                s -= l[(r, k)] * linv[(k, c)];
            }
            linv[(r, c)] = s / l[(r, r)];
        }
    }
    let mut out = Matrix::zeros(n, n);
    for r in 0..n {
        for c in 0..=r {
            let s: f64 = (r..n).map(|k| linv[(k, r)] * linv[(k, c)]).sum();
            out[(r, c)] = s;
            out[(c, r)] = s;
        }
    }
    Ok(out)
}

/// Cholesky factor of a PSD matrix, falling back to `V sqrt(λ₊)` when the
/// matrix is singular. Either way `L Lᵀ = m` up to clamping of tiny negative
/// eigenvalues.
pub fn psd_factor(m: &Matrix) -> Result<Matrix> {
    match cholesky(m) {
        Ok(l) => Ok(l),
        Err(Error::NotPositiveDefinite { .. }) => {
            let (values, vectors) = sym_eig(m)?;
            let max = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if values.iter().any(|&v| v < -1e-10 * max) {
                return Err(Error::numerical("covariance has a negative eigenvalue"));
            }
            let n = m.rows();
            Ok(Matrix::from_fn(n, n, |r, c| vectors[(r, c)] * values[c].max(0.0).sqrt()))
        }
        Err(e) => Err(e),
    }
}

/// Seeded, stream-addressable random source.
///
/// `(seed, stream)` fully determines the sequence. Distinct streams share
/// nothing, so per-sample streams make Monte Carlo reproducible under any
/// thread count.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        SeededRng { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// A fresh generator on another stream of the same seed.
    pub fn fork(&self, stream: u64) -> SeededRng {
        SeededRng::new(self.seed, stream)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }
}

/// `n` i.i.d. standard normal draws.
pub fn standard_normal(rng: &mut SeededRng, n: usize) -> Vector {
    (0..n).map(|_| rng.normal()).collect()
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Complementary error function.
pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// `n` logarithmically spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_spd(rng: &mut SeededRng, n: usize) -> Matrix {
        let a = Matrix::from_fn(n, n, |_, _| rng.normal());
        a.matmul(&a.transpose()).add_diag(0.1)
    }

    #[test]
    fn eig_of_diagonal_and_identity() {
        let (vals, vecs) = sym_eig(&Matrix::from_diag(&[2.0, 5.0])).unwrap();
        assert_eq!(vals.as_slice(), &[2.0, 5.0]);
        assert_eq!(vecs, Matrix::identity(2));
        let (vals, _) = sym_eig(&Matrix::identity(3)).unwrap();
        assert_eq!(vals.as_slice(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn eig_two_by_two() {
        // det([[2-λ,1],[1,2-λ]]) = (2-λ)² - 1 = 0  =>  λ ∈ {1, 3}
        let m = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let (vals, vecs) = sym_eig(&m).unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-14);
        assert!((vals[1] - 3.0).abs() < 1e-14);
        assert!(from_eig(&vals, &vecs).rel_diff(&m) < 1e-12);
    }

    #[test]
    fn eig_rejects_bad_input() {
        assert!(matches!(sym_eig(&Matrix::zeros(2, 3)), Err(Error::Structural(_))));
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eig(&m), Err(Error::Structural(_))));
    }

    #[test]
    fn cholesky_examples() {
        assert_eq!(cholesky(&Matrix::identity(2)).unwrap(), Matrix::identity(2));
        let l = cholesky(&Matrix::from_diag(&[4.0, 9.0])).unwrap();
        assert_eq!(l, Matrix::from_diag(&[2.0, 3.0]));
        let m = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 5.0]]).unwrap();
        let l = cholesky(&m).unwrap();
        let expected = Matrix::from_rows(&[vec![2.0, 0.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(l, expected);
        // multiplication oracle
        assert_eq!(l.matmul(&l.transpose()), m);
    }

    #[test]
    fn cholesky_reports_failing_pivot() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        match cholesky(&m) {
            Err(Error::NotPositiveDefinite { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inverse_spd_roundtrip() {
        let mut rng = SeededRng::new(3, 0);
        let m = random_spd(&mut rng, 5);
        let inv = inverse_spd(&m).unwrap();
        assert!(m.matmul(&inv).rel_diff(&Matrix::identity(5)) < 1e-10);
    }

    #[test]
    fn psd_factor_handles_singular() {
        let v = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![-1.0]]).unwrap();
        let m = v.matmul(&v.transpose());
        let l = psd_factor(&m).unwrap();
        assert!(l.matmul(&l.transpose()).rel_diff(&m) < 1e-12);
    }

    #[test]
    fn normal_draws_are_reproducible() {
        let a = standard_normal(&mut SeededRng::new(0, 0), 3);
        let b = standard_normal(&mut SeededRng::new(0, 0), 3);
        assert_eq!(a, b);
        let c = standard_normal(&mut SeededRng::new(0, 1), 3);
        assert_ne!(a, c);
    }

    #[test]
    fn normal_moments_within_clt_bounds() {
        // sd of the mean is 1e-3 and of the variance about 1.4e-3,
        // so the bounds are ~5 and ~7 standard errors.
        let n = 1_000_000;
        let x = standard_normal(&mut SeededRng::new(0, 0), n);
        let mean = x.mean();
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn cdf_matches_known_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-16);
        assert!((normal_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((normal_cdf(-2.0) - 0.022_750_131_948_179_2).abs() < 1e-15);
        assert!((normal_cdf(5.0) - 0.999_999_713_348_428).abs() < 1e-15);
        assert!((erfc(6.0) - 2.151_973_671_249_891_3e-17).abs() < 1e-30);
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(1e-3, 1e3, 41);
        assert_eq!(g.len(), 41);
        assert!((g[0] - 1e-3).abs() < 1e-18);
        assert!((g[40] - 1e3).abs() < 1e-9);
        assert!((g[20] - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn cholesky_reconstructs_spd(seed in any::<u64>(), n in 1usize..8) {
            let mut rng = SeededRng::new(seed, 0);
            let m = random_spd(&mut rng, n);
            let l = cholesky(&m).unwrap();
            for r in 0..n {
                for c in (r + 1)..n {
                    prop_assert_eq!(l[(r, c)], 0.0);
                }
            }
            prop_assert!(l.matmul(&l.transpose()).rel_diff(&m) < 1e-8);
        }

        #[test]
        fn sym_eig_reconstructs(seed in any::<u64>(), n in 1usize..9) {
            let mut rng = SeededRng::new(seed, 0);
            let a = Matrix::from_fn(n, n, |_, _| rng.normal());
            let m = a.add(&a.transpose());
            let (vals, vecs) = sym_eig(&m).unwrap();
            prop_assert!(vals.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(from_eig(&vals, &vecs).rel_diff(&m) < 1e-8);
            let vtv = vecs.transpose().matmul(&vecs);
            prop_assert!(vtv.sub(&Matrix::identity(n)).max_abs() < 1e-8);
        }
    }
}
