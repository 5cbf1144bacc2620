//! Small dense linear algebra: row-major matrices, Cholesky, symmetric eigen.
//!
//! Problem sizes here are desk scale (p up to a few hundred, Gram matrices up
//! to a few thousand rows), so straightforward O(n^3) routines are adequate.

use crate::scalar::{dot, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    /// Builds from row-major data; panics if the length is wrong.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.cols);
        self.iter_rows().map(|r| dot(r, x)).collect()
    }

    /// `self^T y`
    pub fn tmatvec(&self, y: &[T]) -> Vec<T> {
        assert_eq!(y.len(), self.rows);
        let mut out = vec![T::zero(); self.cols];
        for (r, &yi) in self.iter_rows().zip(y) {
            if yi == T::zero() {
                continue;
            }
            for (o, &v) in out.iter_mut().zip(r) {
                *o += yi * v;
            }
        }
        out
    }

    /// `self^T diag(w) self`
    pub fn weighted_gram(&self, w: &[T]) -> Self {
        assert_eq!(w.len(), self.rows);
        let p = self.cols;
        let mut g = Self::zeros(p, p);
        for (r, &wi) in self.iter_rows().zip(w) {
            if wi == T::zero() {
                continue;
            }
            for a in 0..p {
                let ra = wi * r[a];
                if ra == T::zero() {
                    continue;
                }
                for b in a..p {
                    g.data[a * p + b] += ra * r[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                g.data[a * p + b] = g.data[b * p + a];
            }
        }
        g
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn trace(&self) -> T {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn max_asymmetry(&self) -> T {
        let mut m = T::zero();
        for i in 0..self.rows {
            for j in 0..i {
                m = m.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        m
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Lower-triangular Cholesky factor.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    l: Matrix<T>,
}

/// Failure of a Cholesky factorization: the column whose pivot collapsed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NotPositiveDefinite {
    pub column: usize,
}

impl<T: Scalar> Cholesky<T> {
    /// Factorizes a symmetric matrix. A pivot at or below `rel_tol` times the
    /// largest diagonal entry is treated as a rank deficiency.
    pub fn new(a: &Matrix<T>, rel_tol: T) -> Result<Self, NotPositiveDefinite> {
        assert_eq!(a.rows, a.cols, "cholesky of a non-square matrix");
        let n = a.rows;
        let scale = (0..n).fold(T::zero(), |m, i| m.max(a[(i, i)].abs()));
        let floor = rel_tol * scale.max(T::min_positive_value());
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > floor) {
                return Err(NotPositiveDefinite { column: j });
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Self { l })
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.l.rows;
        assert_eq!(b.len(), n);
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[(i, k)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
        y
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and the matrix whose columns are the eigenvectors.
pub fn symmetric_eigen<T: Scalar>(a: &Matrix<T>) -> (Vec<T>, Matrix<T>) {
    assert_eq!(a.rows, a.cols);
    let n = a.rows;
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let eps = T::epsilon();
    for _sweep in 0..100 {
        let mut off = T::zero();
        let mut diag = T::zero();
        for i in 0..n {
            diag += m[(i, i)] * m[(i, i)];
            for j in 0..i {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if off <= eps * eps * diag.max(T::min_positive_value()) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (T::two() * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
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
    let vals = (0..n).map(|i| m[(i, i)]).collect();
    (vals, v)
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
pub fn largest_eigenvalue<T: Scalar>(a: &Matrix<T>, iters: usize) -> T {
    let n = a.rows();
    if n == 0 {
        return T::zero();
    }
    let mut x: Vec<T> = (0..n)
        .map(|i| T::one() + T::lit(0.01) * T::from_usize_lossy(i % 7))
        .collect();
    let mut lambda = T::zero();
    for _ in 0..iters {
        let y = a.matvec(&x);
        let norm = dot(&y, &y).sqrt();
        if norm == T::zero() {
            return T::zero();
        }
        let next = dot(&x, &y) / dot(&x, &x);
        x = y.into_iter().map(|v| v / norm).collect();
        if (next - lambda).abs() <= T::lit(1e-12) * next.abs() {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda
}
