//! Small dense matrices for the per-path hot loops.
//!
//! State and control dimensions in this crate are tiny (at most
//! [`MAX_DIM`]), and the Monte Carlo engines perform millions of matrix
//! products per solve. [`Mat`] is a `Copy` value type with inline storage so
//! those loops never touch the allocator. Anything that is not on a hot path
//! (eigenvalues, Cholesky factorisations of regression Gram matrices)
//! converts to `nalgebra` and back.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

/// Largest supported row or column count.
pub const MAX_DIM: usize = 4;
const CAP: usize = MAX_DIM * MAX_DIM;

/// Row-major dense matrix with at most `MAX_DIM x MAX_DIM` entries.
#[derive(Clone, Copy)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: [f64; CAP],
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(
            rows <= MAX_DIM && cols <= MAX_DIM,
            "matrix shape {rows}x{cols} exceeds {MAX_DIM}x{MAX_DIM}"
        );
        Mat {
            rows,
            cols,
            data: [0.0; CAP],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * MAX_DIM + i] = 1.0;
        }
        m
    }

    pub fn scalar(v: f64) -> Self {
        let mut m = Mat::zeros(1, 1);
        m.data[0] = v;
        m
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        let mut m = Mat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.set(i, j, v);
            }
        }
        m
    }

    /// Builds from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut m = Mat::zeros(r, c);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), c, "ragged matrix literal");
            for (j, v) in row.iter().enumerate() {
                m.set(i, j, *v);
            }
        }
        m
    }

    pub fn column(values: &[f64]) -> Self {
        let mut m = Mat::zeros(values.len(), 1);
        for (i, v) in values.iter().enumerate() {
            m.set(i, 0, *v);
        }
        m
    }

    pub fn from_dmatrix(d: &DMatrix<f64>) -> Self {
        let mut m = Mat::zeros(d.nrows(), d.ncols());
        for i in 0..d.nrows() {
            for j in 0..d.ncols() {
                m.set(i, j, d[(i, j)]);
            }
        }
        m
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j))
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self.get(i, j)).collect())
            .collect()
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * MAX_DIM + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * MAX_DIM + j] = v;
    }

    /// Entries in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.rows).flat_map(move |i| (0..self.cols).map(move |j| self.get(i, j)))
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entry by row-major flat index.
    #[inline]
    pub fn flat(&self, k: usize) -> f64 {
        self.get(k / self.cols, k % self.cols)
    }

    #[inline]
    pub fn set_flat(&mut self, k: usize, v: f64) {
        let c = self.cols;
        self.set(k / c, k % c, v);
    }

    #[inline]
    pub fn transpose(&self) -> Mat {
        let mut t = Mat {
            rows: self.cols,
            cols: self.rows,
            data: [0.0; CAP],
        };
        for i in 0..MAX_DIM {
            for j in 0..MAX_DIM {
                t.data[j * MAX_DIM + i] = self.data[i * MAX_DIM + j];
            }
        }
        t
    }

    // Entries outside the logical shape are kept at zero, so elementwise
    // operations and products may run over the full inline storage.
    #[inline]
    pub fn scale(&self, s: f64) -> Mat {
        let mut out = *self;
        for v in out.data.iter_mut() {
            *v *= s;
        }
        out
    }

    /// `self + s * other`.
    #[inline]
    pub fn axpy(&self, s: f64, other: &Mat) -> Mat {
        debug_assert_eq!(self.shape(), other.shape());
        let mut out = *self;
        for (v, o) in out.data.iter_mut().zip(other.data.iter()) {
            *v += s * o;
        }
        out
    }

    /// `(M + Mᵀ) / 2`.
    pub fn symmetrize(&self) -> Mat {
        debug_assert_eq!(self.rows, self.cols);
        let mut out = *self;
        for i in 0..self.rows {
            for j in 0..i {
                let v = 0.5 * (self.get(i, j) + self.get(j, i));
                out.set(i, j, v);
                out.set(j, i, v);
            }
        }
        out
    }

    /// Largest absolute difference between the matrix and its transpose.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn frobenius(&self) -> f64 {
        self.entries().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries().all(f64::is_finite)
    }

    /// `⟨self, other⟩ = tr(selfᵀ other)`.
    pub fn dot(&self, other: &Mat) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        let mut s = 0.0;
        for i in 0..self.rows {
            for j in 0..self.cols {
                s += self.get(i, j) * other.get(i, j);
            }
        }
        s
    }

    /// `xᵀ M x` for a column vector `x`.
    pub fn quad_form(&self, x: &Mat) -> f64 {
        debug_assert_eq!(x.cols, 1);
        let mx = *self * *x;
        x.dot(&mx)
    }

    /// Solves `self * X = rhs` by Gaussian elimination with partial pivoting.
    /// Returns `None` when a pivot falls below `1e-300` in magnitude.
    pub fn solve(&self, rhs: &Mat) -> Option<Mat> {
        let n = self.rows;
        debug_assert_eq!(n, self.cols);
        debug_assert_eq!(rhs.rows, n);
        let mut a = *self;
        let mut b = *rhs;
        for col in 0..n {
            let mut piv = col;
            for r in col + 1..n {
                if a.get(r, col).abs() > a.get(piv, col).abs() {
                    piv = r;
                }
            }
            if a.get(piv, col).abs() < 1e-300 {
                return None;
            }
            if piv != col {
                for j in 0..n {
                    let t = a.get(col, j);
                    a.set(col, j, a.get(piv, j));
                    a.set(piv, j, t);
                }
                for j in 0..b.cols {
                    let t = b.get(col, j);
                    b.set(col, j, b.get(piv, j));
                    b.set(piv, j, t);
                }
            }
            let p = a.get(col, col);
            for r in col + 1..n {
                let f = a.get(r, col) / p;
                if f != 0.0 {
                    for j in col..n {
                        a.set(r, j, a.get(r, j) - f * a.get(col, j));
                    }
                    for j in 0..b.cols {
                        b.set(r, j, b.get(r, j) - f * b.get(col, j));
                    }
                }
            }
        }
        let mut x = Mat::zeros(n, b.cols);
        for j in 0..b.cols {
            for i in (0..n).rev() {
                let mut s = b.get(i, j);
                for k in i + 1..n {
                    s -= a.get(i, k) * x.get(k, j);
                }
                x.set(i, j, s / a.get(i, i));
            }
        }
        Some(x)
    }

    pub fn inverse(&self) -> Option<Mat> {
        self.solve(&Mat::identity(self.rows))
    }

    /// Eigenvalues of the symmetric part, ascending.
    pub fn sym_eigenvalues(&self) -> Vec<f64> {
        if self.rows == 1 {
            return vec![self.get(0, 0)];
        }
        let eig = self.symmetrize().to_dmatrix().symmetric_eigenvalues();
        let mut v: Vec<f64> = eig.iter().copied().collect();
        v.sort_by(f64::total_cmp);
        v
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.sym_eigenvalues()[0]
    }

    /// Upper-triangular Cholesky-style factor `U` with `self = Uᵀ U`, used to
    /// evaluate `yᵀ self y` as the exactly non-negative `|U y|²`.
    pub fn cholesky_upper(&self) -> Option<Mat> {
        let n = self.rows;
        let mut l = Mat::zeros(n, n);
        for j in 0..n {
            let mut d = self.get(j, j);
            for k in 0..j {
                d -= l.get(j, k) * l.get(j, k);
            }
            if d <= 0.0 {
                return None;
            }
            let djj = d.sqrt();
            l.set(j, j, djj);
            for i in j + 1..n {
                let mut s = self.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                l.set(i, j, s / djj);
            }
        }
        Some(l.transpose())
    }
}

impl PartialEq for Mat {
    fn eq(&self, other: &Self) -> bool {
        self.shape() == other.shape() && self.entries().zip(other.entries()).all(|(a, b)| a == b)
    }
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mat{:?}", self.to_rows())
    }
}

impl Add for Mat {
    type Output = Mat;
    #[inline]
    fn add(self, rhs: Mat) -> Mat {
        self.axpy(1.0, &rhs)
    }
}

impl Sub for Mat {
    type Output = Mat;
    #[inline]
    fn sub(self, rhs: Mat) -> Mat {
        self.axpy(-1.0, &rhs)
    }
}

impl AddAssign for Mat {
    #[inline]
    fn add_assign(&mut self, rhs: Mat) {
        *self = self.axpy(1.0, &rhs);
    }
}

impl SubAssign for Mat {
    #[inline]
    fn sub_assign(&mut self, rhs: Mat) {
        *self = self.axpy(-1.0, &rhs);
    }
}

impl Neg for Mat {
    type Output = Mat;
    fn neg(self) -> Mat {
        self.scale(-1.0)
    }
}

impl Mul for Mat {
    type Output = Mat;
    #[inline]
    fn mul(self, rhs: Mat) -> Mat {
        debug_assert_eq!(
            self.cols, rhs.rows,
            "shape mismatch {:?} * {:?}",
            self.shape(),
            rhs.shape()
        );
        let mut out = Mat {
            rows: self.rows,
            cols: rhs.cols,
            data: [0.0; CAP],
        };
        if self.rows == 1 && self.cols == 1 && rhs.cols == 1 {
            out.data[0] = self.data[0] * rhs.data[0];
            return out;
        }
        for i in 0..MAX_DIM {
            for k in 0..MAX_DIM {
                let a = self.data[i * MAX_DIM + k];
                for j in 0..MAX_DIM {
                    out.data[i * MAX_DIM + j] += a * rhs.data[k * MAX_DIM + j];
                }
            }
        }
        out
    }
}

impl Mul<f64> for Mat {
    type Output = Mat;
    fn mul(self, rhs: f64) -> Mat {
        self.scale(rhs)
    }
}

impl Serialize for Mat {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mat {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if r == 0 || c == 0 || r > MAX_DIM || c > MAX_DIM {
            return Err(serde::de::Error::custom(format!(
                "matrix must be between 1x1 and {MAX_DIM}x{MAX_DIM}, got {r}x{c}"
            )));
        }
        if rows.iter().any(|row| row.len() != c) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Ok(Mat::from_rows(&rows))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_and_transpose() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Mat::column(&[1.0, -1.0]);
        assert_eq!(a * b, Mat::column(&[-1.0, -1.0]));
        assert_eq!(a.transpose().get(0, 1), 3.0);
    }

    #[test]
    fn solve_recovers_inverse() {
        let a = Mat::from_rows(&[vec![0.0, 2.0], vec![1.0, 1.0]]);
        let inv = a.inverse().unwrap();
        let id = a * inv;
        assert!((id - Mat::identity(2)).max_abs() < 1e-15);
        assert!(Mat::zeros(2, 2).inverse().is_none());
    }

    #[test]
    fn cholesky_factor_reproduces_matrix() {
        let r = Mat::from_rows(&[vec![4.0, 1.0], vec![1.0, 3.0]]);
        let u = r.cholesky_upper().unwrap();
        assert!((u.transpose() * u - r).max_abs() < 1e-14);
        assert!(Mat::scalar(-1.0).cholesky_upper().is_none());
    }

    #[test]
    fn eigenvalues_of_diagonal() {
        let d = Mat::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.5]]);
        assert_eq!(d.sym_eigenvalues(), vec![0.5, 2.0]);
    }
}
