//! LU factorization with partial pivoting and a 1-norm condition estimate.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// `P·A = L·U` packed in a single matrix (unit lower triangle implicit).
#[derive(Debug, Clone)]
pub struct Lu<T> {
    lu: Matrix<T>,
    /// `perm[i]` is the row of `A` placed at row `i`.
    perm: Vec<usize>,
}

impl<T: Scalar> Lu<T> {
    /// Factorizes a square matrix. Fails on an exactly zero pivot.
    pub fn factor(a: &Matrix<T>) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(Error::Shape(format!("LU needs a square matrix, got {}x{}", n, a.cols())));
        }
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut p = k;
            let mut best = lu[(k, k)].abs();
            for r in k + 1..n {
                let v = lu[(r, k)].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if best == T::zero() || !best.is_finite() {
                return Err(Error::Solver(format!("singular matrix: zero pivot in column {k}")));
            }
            if p != k {
                perm.swap(p, k);
                let data = lu.as_mut_slice();
                for c in 0..n {
                    data.swap(k * n + c, p * n + c);
                }
            }
            let pivot = lu[(k, k)];
            let data = lu.as_mut_slice();
            let (upper, lower) = data.split_at_mut((k + 1) * n);
            let pivot_row = &upper[k * n + k + 1..k * n + n];
            for row in lower.chunks_mut(n) {
                let factor = row[k] / pivot;
                row[k] = factor;
                if factor == T::zero() {
                    continue;
                }
                for (x, &u) in row[k + 1..].iter_mut().zip(pivot_row) {
                    *x -= factor * u;
                }
            }
        }
        Ok(Self { lu, perm })
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    /// Solves `A·X = B` for every column of `B`.
    pub fn solve(&self, b: &Matrix<T>) -> Matrix<T> {
        let n = self.dim();
        assert_eq!(b.rows(), n, "rhs row mismatch");
        let m = b.cols();
        let mut x = b.select_rows(&self.perm);
        let lu = &self.lu;
        // forward substitution with unit lower triangle
        for i in 0..n {
            for k in 0..i {
                let l = lu[(i, k)];
                if l == T::zero() {
                    continue;
                }
                for c in 0..m {
                    let v = x[(k, c)];
                    x[(i, c)] -= l * v;
                }
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let u = lu[(i, k)];
                if u == T::zero() {
                    continue;
                }
                for c in 0..m {
                    let v = x[(k, c)];
                    x[(i, c)] -= u * v;
                }
            }
            let d = lu[(i, i)];
            for c in 0..m {
                x[(i, c)] /= d;
            }
        }
        x
    }

    /// Solves `Aᵀ·X = B`.
    pub fn solve_transpose(&self, b: &Matrix<T>) -> Matrix<T> {
        let n = self.dim();
        assert_eq!(b.rows(), n, "rhs row mismatch");
        let m = b.cols();
        let lu = &self.lu;
        let mut z = b.clone();
        // Uᵀ z = b, sweeping rows of U so memory is read contiguously.
        for k in 0..n {
            let d = lu[(k, k)];
            for c in 0..m {
                z[(k, c)] /= d;
            }
            let zk = z.row(k).to_vec();
            for (i, &u) in lu.row(k).iter().enumerate().skip(k + 1) {
                if u == T::zero() {
                    continue;
                }
                for (x, &v) in z.row_mut(i).iter_mut().zip(&zk) {
                    *x -= u * v;
                }
            }
        }
        // Lᵀ w = z
        for k in (0..n).rev() {
            let zk = z.row(k).to_vec();
            for (i, &l) in lu.row(k).iter().enumerate().take(k) {
                if l == T::zero() {
                    continue;
                }
                for (x, &v) in z.row_mut(i).iter_mut().zip(&zk) {
                    *x -= l * v;
                }
            }
        }
        let mut x = Matrix::zeros(n, m);
        for (i, &p) in self.perm.iter().enumerate() {
            x.row_mut(p).copy_from_slice(z.row(i));
        }
        x
    }

    /// Estimates `‖A⁻¹‖₁` with Hager's method (at most five iterations).
    pub fn inverse_norm1_estimate(&self) -> T {
        let n = self.dim();
        if n == 0 {
            return T::zero();
        }
        let mut x = Matrix::filled(n, 1, T::one() / T::from_count(n));
        let mut estimate = T::zero();
        let mut last_j = usize::MAX;
        for _ in 0..5 {
            let y = self.solve(&x);
            let norm: T = y.as_slice().iter().map(|v| v.abs()).sum();
            estimate = estimate.max(norm);
            let xi = y.map(|v| if v >= T::zero() { T::one() } else { -T::one() });
            let z = self.solve_transpose(&xi);
            let (j, zmax) = z
                .as_slice()
                .iter()
                .enumerate()
                .fold((0, T::zero()), |(bj, bv), (i, v)| if v.abs() > bv { (i, v.abs()) } else { (bj, bv) });
            let ztx: T = z.as_slice().iter().zip(x.as_slice()).map(|(&a, &b)| a * b).sum();
            if zmax <= ztx || j == last_j {
                break;
            }
            last_j = j;
            x = Matrix::zeros(n, 1);
            x[(j, 0)] = T::one();
        }
        estimate
    }
}

/// Matrix 1-norm (maximum absolute column sum).
pub fn norm1<T: Scalar>(a: &Matrix<T>) -> T {
    let mut sums = vec![T::zero(); a.cols()];
    for r in 0..a.rows() {
        for (s, v) in sums.iter_mut().zip(a.row(r)) {
            *s += v.abs();
        }
    }
    sums.into_iter().fold(T::zero(), T::max)
}
