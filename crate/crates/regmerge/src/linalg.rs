//! Dense row-major matrices, Gram accumulation, and the ridge-stabilized
//! symmetric solve behind every closed-form merge.
//!
//! Everything here is plain `f64` with fixed loop orders: identical inputs
//! produce bitwise-identical outputs, which the merge-equivalence and
//! determinism tests rely on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense 2-D array of 64-bit floats, row-major.
///
/// Zero rows (an empty batch) and zero columns are representable; operations
/// that need a nonempty feature dimension check for it themselves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr", into = "MatrixRepr")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize, Clone)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<MatrixRepr> for Matrix {
    type Error = Error;
    fn try_from(r: MatrixRepr) -> Result<Self> {
        Matrix::new(r.rows, r.cols, r.data)
    }
}

impl From<Matrix> for MatrixRepr {
    fn from(m: Matrix) -> Self {
        MatrixRepr {
            rows: m.rows,
            cols: m.cols,
            data: m.data,
        }
    }
}

impl Matrix {
    /// Construct and validate: length must be rows*cols and all entries finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::validation(format!(
                "matrix data length {} does not match shape {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("matrix entries must be finite"));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Internal constructor for values produced by our own arithmetic.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
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
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::validation("ragged rows"));
        }
        Matrix::new(rows.len(), cols, rows.concat())
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self * other`, naive triple loop with a fixed i-k-j order.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::validation(format!(
                "matmul shape mismatch: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let lhs = i * out.cols;
                let rhs = k * other.cols;
                for j in 0..other.cols {
                    out.data[lhs + j] += a * other.data[rhs + j];
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix::from_raw(
            self.rows,
            self.cols,
            self.data.iter().map(|v| v * s).collect(),
        )
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_raw(
            self.rows,
            self.cols,
            self.data.iter().map(|v| f(*v)).collect(),
        )
    }

    pub(crate) fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::validation(format!(
                "shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| f(*a, *b))
            .collect();
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Relative Frobenius distance `|self - other|_F / |other|_F`
    /// (absolute when `other` is zero).
    pub fn rel_frob_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "rel_frob_diff shape mismatch");
        let diff = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let denom = other.frob_norm();
        if denom == 0.0 {
            diff
        } else {
            diff / denom
        }
    }

    /// Bitwise equality, distinguishing 0.0 from -0.0.
    pub fn bitwise_eq(&self, other: &Matrix) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Gram matrix `X^T X` of a layer's captured inputs, with the row count that
/// produced it. A raw sum, not a per-example mean: relative dataset sizes
/// weight the merge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GramRepr", into = "GramRepr")]
pub struct GramMatrix {
    dim: usize,
    sample_count: u64,
    values: Matrix,
}

#[derive(Serialize, Deserialize, Clone)]
struct GramRepr {
    dim: usize,
    sample_count: u64,
    values: Vec<f64>,
}

impl TryFrom<GramRepr> for GramMatrix {
    type Error = Error;
    fn try_from(r: GramRepr) -> Result<Self> {
        let values = Matrix::new(r.dim, r.dim, r.values)?;
        let g = GramMatrix {
            dim: r.dim,
            sample_count: r.sample_count,
            values,
        };
        g.check_symmetric()?;
        Ok(g)
    }
}

impl From<GramMatrix> for GramRepr {
    fn from(g: GramMatrix) -> Self {
        GramRepr {
            dim: g.dim,
            sample_count: g.sample_count,
            values: g.values.data,
        }
    }
}

impl GramMatrix {
    pub fn zero(dim: usize) -> Self {
        GramMatrix {
            dim,
            sample_count: 0,
            values: Matrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    fn check_symmetric(&self) -> Result<()> {
        let tol = 1e-12_f64.max(1e-12 * self.values.max_abs());
        for i in 0..self.dim {
            for j in (i + 1)..self.dim {
                if (self.values.get(i, j) - self.values.get(j, i)).abs() > tol {
                    return Err(Error::validation("gram matrix is not symmetric"));
                }
            }
        }
        Ok(())
    }

    /// Fold another batch of rows into the running sum.
    ///
    /// Accumulation is sequential by contract: per column pair, batch rows are
    /// summed in order and added once to both triangle entries, so the result
    /// stays bitwise symmetric and is reproducible for a fixed batch order.
    pub fn accumulate(&mut self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.dim {
            return Err(Error::validation(format!(
                "gram accumulate dimension mismatch: batch has {} columns, accumulator dim {}",
                batch.cols(),
                self.dim
            )));
        }
        for i in 0..self.dim {
            for j in i..self.dim {
                let mut s = 0.0;
                for r in 0..batch.rows() {
                    s += batch.get(r, i) * batch.get(r, j);
                }
                let v = self.values.get(i, j) + s;
                self.values.set(i, j, v);
                self.values.set(j, i, v);
            }
        }
        self.sample_count += batch.rows() as u64;
        Ok(())
    }

    /// Scale off-diagonal entries by `alpha` (1.0 returns a plain clone, so
    /// the disabled default stays bitwise transparent).
    pub fn scale_offdiag(&self, alpha: f64) -> GramMatrix {
        if alpha == 1.0 {
            return self.clone();
        }
        let mut out = self.clone();
        for i in 0..self.dim {
            for j in 0..self.dim {
                if i != j {
                    out.values.set(i, j, self.values.get(i, j) * alpha);
                }
            }
        }
        out
    }

    pub fn add(&self, other: &GramMatrix) -> Result<GramMatrix> {
        if self.dim != other.dim {
            return Err(Error::validation("gram dimension mismatch"));
        }
        Ok(GramMatrix {
            dim: self.dim,
            sample_count: self.sample_count + other.sample_count,
            values: self.values.add(&other.values)?,
        })
    }
}

/// Compute `X^T X` in one pass. Each unordered column pair is summed once and
/// written to both triangles, so the result is bitwise symmetric.
pub fn gram(x: &Matrix) -> Result<GramMatrix> {
    if x.cols() == 0 {
        return Err(Error::validation("empty feature dimension"));
    }
    let mut g = GramMatrix::zero(x.cols());
    g.accumulate(x)?;
    Ok(g)
}

const RIDGE_RETRIES: usize = 6;

/// Solve `(A + lambda I) W = B` for symmetric positive (semi)definite `A`.
///
/// `lambda = ridge_scale * trace(A) / m` (or `ridge_scale` itself when the
/// trace is zero). If the Cholesky factorization fails, lambda is escalated
/// by 10x up to [`RIDGE_RETRIES`] times before giving up.
pub fn solve_spd(a: &Matrix, b: &Matrix, ridge_scale: f64) -> Result<Matrix> {
    let m = a.rows();
    if a.cols() != m {
        return Err(Error::validation("solve_spd: A must be square"));
    }
    if b.rows() != m {
        return Err(Error::validation(format!(
            "solve_spd: B has {} rows, expected {}",
            b.rows(),
            m
        )));
    }
    if !(ridge_scale >= 0.0) {
        return Err(Error::validation("solve_spd: ridge_scale must be >= 0"));
    }
    check_symmetric(a)?;

    let trace: f64 = (0..m).map(|i| a.get(i, i)).sum();
    let mut lambda = if trace == 0.0 {
        ridge_scale
    } else {
        ridge_scale * trace / m as f64
    };

    for _ in 0..=RIDGE_RETRIES {
        let mut shifted = a.clone();
        for i in 0..m {
            shifted.set(i, i, shifted.get(i, i) + lambda);
        }
        if let Some(l) = cholesky(&shifted) {
            return Ok(cholesky_solve(&l, b));
        }
        lambda *= 10.0;
    }
    Err(Error::SingularGram)
}

fn check_symmetric(a: &Matrix) -> Result<()> {
    let tol = 1e-12_f64.max(1e-12 * a.max_abs());
    for i in 0..a.rows() {
        for j in (i + 1)..a.cols() {
            if (a.get(i, j) - a.get(j, i)).abs() > tol {
                return Err(Error::validation("solve_spd: A is not symmetric"));
            }
        }
    }
    Ok(())
}

/// Lower-triangular Cholesky factor, or None when a pivot is non-positive or
/// non-finite.
fn cholesky(a: &Matrix) -> Option<Matrix> {
    let m = a.rows();
    let mut l = Matrix::zeros(m, m);
    for j in 0..m {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l.set(j, j, djj);
        for i in (j + 1)..m {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / djj);
        }
    }
    Some(l)
}

/// Solve `L L^T W = B` column by column.
fn cholesky_solve(l: &Matrix, b: &Matrix) -> Matrix {
    let m = l.rows();
    let n = b.cols();
    let mut out = Matrix::zeros(m, n);
    let mut y = vec![0.0; m];
    for col in 0..n {
        for i in 0..m {
            let mut s = b.get(i, col);
            for k in 0..i {
                s -= l.get(i, k) * y[k];
            }
            y[i] = s / l.get(i, i);
        }
        for i in (0..m).rev() {
            let mut s = y[i];
            for k in (i + 1)..m {
                s -= l.get(k, i) * out.get(k, col);
            }
            out.set(i, col, s / l.get(i, i));
        }
    }
    out
}

const SVD_SWEEPS: usize = 60;

/// One-sided Jacobi SVD. Returns (U, sigma, V) with A = U * diag(sigma) * V^T,
/// U of A's shape with orthonormal nonzero columns, sigma descending and
/// nonnegative, V square with orthonormal columns. Columns beyond the rank
/// carry sigma = 0 and a zero U column.
pub fn svd(a: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let (rows, cols) = a.shape();
    let mut work = a.clone();
    let mut v = Matrix::identity(cols);
    for _ in 0..SVD_SWEEPS {
        let mut rotated = false;
        for p in 0..cols.saturating_sub(1) {
            for q in (p + 1)..cols {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..rows {
                    let xp = work.get(i, p);
                    let xq = work.get(i, q);
                    app += xp * xp;
                    aqq += xq * xq;
                    apq += xp * xq;
                }
                // Cauchy-Schwarz guarantees |apq| <= sqrt(app*aqq), so this
                // also skips exactly-zero columns.
                if apq.abs() <= f64::EPSILON * (app * aqq).sqrt() {
                    continue;
                }
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let xp = work.get(i, p);
                    let xq = work.get(i, q);
                    work.set(i, p, c * xp - s * xq);
                    work.set(i, q, s * xp + c * xq);
                }
                for i in 0..cols {
                    let vp = v.get(i, p);
                    let vq = v.get(i, q);
                    v.set(i, p, c * vp - s * vq);
                    v.set(i, q, s * vp + c * vq);
                }
                rotated = true;
            }
        }
        if !rotated {
            break;
        }
    }
    // Column norms are the singular values; sort descending.
    let sigma: Vec<f64> = (0..cols)
        .map(|j| (0..rows).map(|i| work.get(i, j).powi(2)).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).expect("finite norms"));
    let mut u = Matrix::zeros(rows, cols);
    let mut v_sorted = Matrix::zeros(cols, cols);
    let mut sigma_sorted = Vec::with_capacity(cols);
    for (dst, &src) in order.iter().enumerate() {
        let s = sigma[src];
        sigma_sorted.push(s);
        if s > 0.0 {
            for i in 0..rows {
                u.set(i, dst, work.get(i, src) / s);
            }
        }
        for i in 0..cols {
            v_sorted.set(i, dst, v.get(i, src));
        }
    }
    (u, sigma_sorted, v_sorted)
}
