//! Dense linear-algebra primitives shared by all modules.
//!
//! Everything here is double precision and allocation-simple: row-major
//! `Vec<f64>` storage, Cholesky factorizations with escalating jitter, and
//! triangular solves. No attempt is made at sparse or structured formats.

use crate::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn column(v: &[f64]) -> Self {
        Mat { rows: v.len(), cols: 1, data: v.to_vec() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn trace(&self) -> f64 {
        assert_eq!(self.rows, self.cols);
        (0..self.rows).map(|i| self[(i, i)]).sum()
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Dense symmetric matrix. Construction validates symmetry and finiteness.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    mat: Mat,
}

impl SymMatrix {
    /// Wraps a square matrix, checking symmetry within `1e-12` relative and
    /// that all entries are finite.
    pub fn new(mat: Mat) -> Result<Self> {
        if mat.rows() != mat.cols() {
            return Err(Error::DimensionMismatch(format!(
                "symmetric matrix must be square, got {}x{}",
                mat.rows(),
                mat.cols()
            )));
        }
        let scale = mat.data().iter().fold(0.0f64, |a, &x| a.max(x.abs())).max(1.0);
        for i in 0..mat.rows() {
            for j in 0..i {
                let d = (mat[(i, j)] - mat[(j, i)]).abs();
                if d > 1e-12 * scale {
                    return Err(Error::InvalidParameter(format!(
                        "matrix not symmetric at ({i},{j}): asymmetry {d:e}"
                    )));
                }
            }
        }
        if mat.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("symmetric matrix entries".into()));
        }
        Ok(SymMatrix { mat })
    }

    /// Builds from a callback evaluated on the lower triangle and mirrored, so
    /// the result is exactly symmetric.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut mat = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = f(i, j);
                mat[(i, j)] = v;
                mat[(j, i)] = v;
            }
        }
        SymMatrix { mat }
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix { mat: Mat::identity(n) }
    }

    pub fn n(&self) -> usize {
        self.mat.rows()
    }

    pub fn mat(&self) -> &Mat {
        &self.mat
    }
}

impl std::ops::Index<(usize, usize)> for SymMatrix {
    type Output = f64;
    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.mat[idx]
    }
}

/// Lower-triangular Cholesky factor together with the jitter that was needed.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    pub l: Mat,
    pub jitter: f64,
}

impl CholeskyFactor {
    /// Solves `L x = b`.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        solve_lower(&self.l, b)
    }

    /// Solves `L^T x = b`.
    pub fn solve_lower_t(&self, b: &[f64]) -> Vec<f64> {
        solve_lower_t(&self.l, b)
    }

    /// Solves `(L L^T) x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.solve_lower_t(&self.solve_lower(b))
    }

    /// Solves `(L L^T) X = B` column by column.
    pub fn solve_mat(&self, b: &Mat) -> Mat {
        let n = self.l.rows();
        assert_eq!(b.rows(), n);
        let mut out = Mat::zeros(n, b.cols());
        let mut col = vec![0.0; n];
        for j in 0..b.cols() {
            for i in 0..n {
                col[i] = b[(i, j)];
            }
            let x = self.solve(&col);
            for i in 0..n {
                out[(i, j)] = x[i];
            }
        }
        out
    }

    /// `(L L^T)^{-1}` as a dense matrix.
    pub fn inverse(&self) -> Mat {
        self.solve_mat(&Mat::identity(self.l.rows()))
    }

    /// `log det (L L^T) = 2 sum log L_ii`.
    pub fn log_det(&self) -> f64 {
        (0..self.l.rows()).map(|i| self.l[(i, i)].ln()).sum::<f64>() * 2.0
    }
}

/// Plain Cholesky without jitter; fails on a non-positive pivot.
pub(crate) fn cholesky_raw(m: &Mat, jitter: f64) -> Option<Mat> {
    let n = m.rows();
    let mut l = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = m[(i, j)] + if i == j { jitter } else { 0.0 };
            for k in 0..j {
                sum -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return None;
                }
                l[(i, i)] = sum.sqrt();
            } else {
                l[(i, j)] = sum / l[(j, j)];
            }
        }
    }
    Some(l)
}

/// Relative base jitter shared by every covariance factorization in the
/// crate. Large enough that the first attempt virtually always succeeds, so
/// the factor (and hence the bound) stays a smooth function of the
/// parameters even for near-singular priors.
pub const JITTER: f64 = 1e-8;

/// Cholesky factorization with escalating jitter.
///
/// The jitter is relative to the mean diagonal and applied from the first
/// attempt on, so the factor is a smooth function of the input in the common
/// case; escalation by factors of 10 only kicks in on failure.
pub fn robust_cholesky(m: &SymMatrix, base_jitter: f64) -> Result<CholeskyFactor> {
    let n = m.n();
    let scale = ((0..n).map(|i| m.mat()[(i, i)]).sum::<f64>() / n as f64)
        .abs()
        .max(f64::MIN_POSITIVE);
    for attempt in 0..8 {
        let jitter = base_jitter * scale * 10f64.powi(attempt);
        if let Some(l) = cholesky_raw(m.mat(), jitter) {
            return Ok(CholeskyFactor { l, jitter });
        }
    }
    Err(Error::NotPositiveDefinite { max_jitter: base_jitter * scale * 1e7 })
}

/// `tr(a b)` without forming the product: `sum_ij a_ij b_ji = sum_ij a_ij b_ij`
/// for symmetric arguments.
pub fn trace_product(a: &SymMatrix, b: &SymMatrix) -> Result<f64> {
    if a.n() != b.n() {
        return Err(Error::DimensionMismatch(format!(
            "trace_product: {} vs {}",
            a.n(),
            b.n()
        )));
    }
    Ok(a.mat()
        .data()
        .iter()
        .zip(b.mat().data())
        .map(|(x, y)| x * y)
        .sum())
}

/// Forward substitution `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: &Mat, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    assert_eq!(b.len(), n);
    let mut x = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[(i, k)] * x[k];
        }
        x[i] = sum / l[(i, i)];
    }
    x
}

/// Back substitution `L^T x = b` for lower-triangular `L`.
pub fn solve_lower_t(l: &Mat, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    assert_eq!(b.len(), n);
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = b[i];
        for k in i + 1..n {
            sum -= l[(k, i)] * x[k];
        }
        x[i] = sum / l[(i, i)];
    }
    x
}

/// Solves `L X = B` for all columns of `B`.
pub fn solve_lower_mat(l: &Mat, b: &Mat) -> Mat {
    let n = l.rows();
    assert_eq!(b.rows(), n);
    let mut out = b.clone();
    for j in 0..b.cols() {
        for i in 0..n {
            let mut sum = out[(i, j)];
            for k in 0..i {
                sum -= l[(i, k)] * out[(k, j)];
            }
            out[(i, j)] = sum / l[(i, i)];
        }
    }
    out
}

/// Solves `L^T X = B` for all columns of `B`.
pub fn solve_lower_t_mat(l: &Mat, b: &Mat) -> Mat {
    let n = l.rows();
    assert_eq!(b.rows(), n);
    let mut out = b.clone();
    for j in 0..b.cols() {
        for i in (0..n).rev() {
            let mut sum = out[(i, j)];
            for k in i + 1..n {
                sum -= l[(k, i)] * out[(k, j)];
            }
            out[(i, j)] = sum / l[(i, i)];
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
