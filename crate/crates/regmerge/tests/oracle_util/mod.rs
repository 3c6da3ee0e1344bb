//! Independent reference implementations shared by the integration tests.
//!
//! Everything here recomputes results from first principles with algorithms
//! deliberately different from the library's (naive triple-loop products,
//! Gauss-Jordan with full pivoting instead of Cholesky) so agreement between
//! the two is meaningful.

// Each test target compiles this module separately and uses a subset of it.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regmerge::linalg::{gram, GramMatrix, Matrix};

/// Plain triple-loop matrix product.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for k in 0..a.cols() {
                acc += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, acc);
        }
    }
    out
}

pub fn naive_transpose(a: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.cols(), a.rows());
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            out.set(j, i, a.get(i, j));
        }
    }
    out
}

/// Solve `A X = B` by Gauss-Jordan elimination with partial pivoting.
/// Returns `None` when a pivot collapses below `1e-12 * max|A|`.
pub fn gauss_jordan_solve(a: &Matrix, b: &Matrix) -> Option<Matrix> {
    let n = a.rows();
    assert_eq!(a.cols(), n);
    assert_eq!(b.rows(), n);
    let k = b.cols();
    // Augmented system as plain row vectors.
    let mut rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut r: Vec<f64> = (0..n).map(|j| a.get(i, j)).collect();
            r.extend((0..k).map(|j| b.get(i, j)));
            r
        })
        .collect();
    let tol = 1e-12 * (0..n).flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| a.get(i, j).abs())
        .fold(1.0_f64, f64::max);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&p, &q| rows[p][col].abs().total_cmp(&rows[q][col].abs()))
            .unwrap();
        if rows[pivot][col].abs() <= tol {
            return None;
        }
        rows.swap(col, pivot);
        let scale = rows[col][col];
        for v in rows[col].iter_mut() {
            *v /= scale;
        }
        for r in 0..n {
            if r != col {
                let factor = rows[r][col];
                if factor != 0.0 {
                    for c in 0..(n + k) {
                        let sub = factor * rows[col][c];
                        rows[r][c] -= sub;
                    }
                }
            }
        }
    }
    let mut x = Matrix::zeros(n, k);
    for i in 0..n {
        for j in 0..k {
            x.set(i, j, rows[i][n + j]);
        }
    }
    Some(x)
}

/// Least-squares solution of the stacked system `[X_1; X_2; ...] W ≈
/// [X_1 W_1; X_2 W_2; ...]` through naively assembled normal equations.
pub fn stacked_least_squares(xs: &[Matrix], ws: &[Matrix]) -> Matrix {
    assert_eq!(xs.len(), ws.len());
    let m = xs[0].cols();
    let n = ws[0].cols();
    let mut a = Matrix::zeros(m, m);
    let mut b = Matrix::zeros(m, n);
    for (x, w) in xs.iter().zip(ws) {
        let xt = naive_transpose(x);
        a = matrix_add(&a, &naive_matmul(&xt, x));
        b = matrix_add(&b, &naive_matmul(&xt, &naive_matmul(x, w)));
    }
    gauss_jordan_solve(&a, &b).expect("oracle system should be well conditioned")
}

/// The merge objective: sum over tasks of the squared Frobenius distance
/// between the candidate's and the task model's outputs on the task inputs.
pub fn merge_objective(w: &Matrix, xs: &[Matrix], ws: &[Matrix]) -> f64 {
    let mut total = 0.0;
    for (x, wi) in xs.iter().zip(ws) {
        let diff = matrix_sub(&naive_matmul(x, w), &naive_matmul(x, wi));
        for i in 0..diff.rows() {
            for j in 0..diff.cols() {
                total += diff.get(i, j) * diff.get(i, j);
            }
        }
    }
    total
}

pub fn matrix_add(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = a.clone();
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            out.set(i, j, a.get(i, j) + b.get(i, j));
        }
    }
    out
}

pub fn matrix_sub(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = a.clone();
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            out.set(i, j, a.get(i, j) - b.get(i, j));
        }
    }
    out
}

/// Central finite difference of `f` in the `(i, j)` coordinate of `at`.
pub fn central_fd(f: &dyn Fn(&Matrix) -> f64, at: &Matrix, i: usize, j: usize, h: f64) -> f64 {
    let mut plus = at.clone();
    plus.set(i, j, at.get(i, j) + h);
    let mut minus = at.clone();
    minus.set(i, j, at.get(i, j) - h);
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Uniform random matrix in `[lo, hi)`.
pub fn rand_mat(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random input batch with at least `dim + 2` rows and its Gram matrix;
/// almost surely positive definite.
pub fn random_inputs_and_gram(
    dim: usize,
    n_rows: usize,
    rng: &mut ChaCha8Rng,
) -> (Matrix, GramMatrix) {
    let n = n_rows.max(dim + 2);
    let x = rand_mat(n, dim, -1.0, 1.0, rng);
    let g = gram(&x).unwrap();
    (x, g)
}

pub fn rel_frob(a: &Matrix, b: &Matrix) -> f64 {
    a.rel_frob_diff(b)
}
