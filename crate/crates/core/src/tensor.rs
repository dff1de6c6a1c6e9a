//! Dense row-major matrices and vectors.
//!
//! Every reduction (dot products, norms, row sums) walks its operands in
//! ascending index order, so results are bit-reproducible.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Pivots smaller than this (after row pivoting) are treated as singular.
pub const SINGULAR_PIVOT: f64 = 1e-12;

/// Default iteration cap for [`power_iteration`].
pub const POWER_MAX_ITERS: usize = 200;

/// Default early-stopping tolerance for [`power_iteration`].
pub const POWER_TOL: f64 = 1e-12;

#[derive(Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    /// Builds a vector, rejecting NaN and infinities.
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { data })
    }

    pub(crate) fn from_vec(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(len: usize) -> Self {
        Self::filled(len, 0.0)
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Self {
            data: vec![value; len],
        }
    }

    /// The all-ones vector scaled to unit ℓ1 norm.
    pub fn uniform(len: usize) -> Self {
        Self::filled(len, 1.0 / len as f64)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|x| x.abs()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.dot_unchecked(self).sqrt()
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::shape(
                "dot",
                format!("lengths {} and {}", self.len(), other.len()),
            ));
        }
        Ok(self.dot_unchecked(other))
    }

    fn dot_unchecked(&self, other: &Vector) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector::from_vec(self.data.iter().map(|x| x * s).collect())
    }

    pub fn max_abs_diff(&self, other: &Vector) -> f64 {
        assert_eq!(self.len(), other.len(), "max_abs_diff length mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(&self.data).finish()
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.data
    }
}

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a row-major matrix; `data.len()` must equal `rows * cols` and
    /// every entry must be finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{} entries for a {rows}x{cols} matrix", data.len()),
            ));
        }
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Matrix::from_rows", "ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    /// Square matrix with `v` on the diagonal.
    pub fn diagonal(v: &Vector) -> Self {
        Self::from_fn(v.len(), v.len(), |i, j| if i == j { v[i] } else { 0.0 })
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_vec(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    /// `self += s * other`, in place.
    pub fn axpy(&mut self, s: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape("axpy", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    fn zip_with(&self, op: &'static str, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same_shape(op, other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix::from_vec(self.rows, self.cols, data))
    }

    fn check_same_shape(&self, op: &'static str, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    pub fn matvec(&self, v: &Vector) -> Result<Vector> {
        if self.cols != v.len() {
            return Err(Error::shape(
                "matvec",
                format!("{}x{} times length {}", self.rows, self.cols, v.len()),
            ));
        }
        Ok(Vector::from_vec(
            (0..self.rows).map(|i| dot(self.row(i), v.as_slice())).collect(),
        ))
    }

    pub fn row_sums(&self) -> Vector {
        Vector::from_vec((0..self.rows).map(|i| self.row(i).iter().sum()).collect())
    }

    pub fn col_sums(&self) -> Vector {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (acc, x) in out.iter_mut().zip(self.row(i)) {
                *acc += x;
            }
        }
        Vector::from_vec(out)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn min_entry(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Copies columns `start..start + width` into a new matrix.
    pub fn column_block(&self, start: usize, width: usize) -> Matrix {
        Matrix::from_fn(self.rows, width, |i, j| self[(i, start + j)])
    }

    /// Writes `block` into columns starting at `start`.
    pub fn set_column_block(&mut self, start: usize, block: &Matrix) {
        assert_eq!(block.rows, self.rows);
        for i in 0..self.rows {
            self.row_mut(i)[start..start + block.cols].copy_from_slice(block.row(i));
        }
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

/// Sequential dot product.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    // i-k-j order: each output entry accumulates over k ascending.
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_transpose_b(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape(
            "matmul_transpose_b",
            format!("{}x{} times ({}x{})ᵀ", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    Ok(Matrix::from_fn(a.rows, b.rows, |i, j| dot(a.row(i), b.row(j))))
}

pub fn frobenius_norm(a: &Matrix) -> f64 {
    a.data.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Solves `a · X = b` by LU factorization with partial row pivoting.
pub fn solve_linear(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::shape(
            "solve_linear",
            format!("coefficient matrix is {}x{}", a.rows, a.cols),
        ));
    }
    if b.rows != a.rows {
        return Err(Error::shape(
            "solve_linear",
            format!("{} right-hand-side rows for a {}x{} system", b.rows, a.rows, a.cols),
        ));
    }
    let n = a.rows;
    let mut lu = a.clone();
    let mut x = b.clone();

    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&p, &q| lu[(p, col)].abs().total_cmp(&lu[(q, col)].abs()).then(q.cmp(&p)))
            .expect("non-empty pivot range");
        let pivot = lu[(pivot_row, col)];
        if pivot.abs() < SINGULAR_PIVOT {
            return Err(Error::Singular { column: col, pivot });
        }
        if pivot_row != col {
            swap_rows(&mut lu, col, pivot_row);
            swap_rows(&mut x, col, pivot_row);
        }
        for r in col + 1..n {
            let factor = lu[(r, col)] / pivot;
            if factor == 0.0 {
                continue;
            }
            lu[(r, col)] = factor;
            for c in col + 1..n {
                let v = lu[(col, c)];
                lu[(r, c)] -= factor * v;
            }
            for c in 0..x.cols {
                let v = x[(col, c)];
                x[(r, c)] -= factor * v;
            }
        }
    }

    // Back substitution on the upper factor.
    for r in (0..n).rev() {
        for c in 0..x.cols {
            let mut acc = x[(r, c)];
            for k in r + 1..n {
                acc -= lu[(r, k)] * x[(k, c)];
            }
            x[(r, c)] = acc / lu[(r, r)];
        }
    }
    Ok(x)
}

fn swap_rows(m: &mut Matrix, a: usize, b: usize) {
    if a == b {
        return;
    }
    let cols = m.cols;
    for c in 0..cols {
        m.data.swap(a * cols + c, b * cols + c);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerIteration {
    /// Dominant direction with unit ℓ1 norm.
    pub v: Vector,
    /// `‖A v‖₁` for the returned `v`.
    pub lambda: f64,
    pub iters_used: usize,
}

/// ℓ1-normalized power iteration `v ← A v / ‖A v‖₁`.
///
/// Intended for nonnegative `a` and strictly positive `x0`. Stops early once
/// successive iterates differ by less than `tol` in ℓ1. Returns
/// [`Error::DegenerateOperator`] if `A v` vanishes; for nonnegative input
/// this means `a` is nilpotent.
pub fn power_iteration(a: &Matrix, x0: &Vector, max_iters: usize, tol: f64) -> Result<PowerIteration> {
    if !a.is_square() {
        return Err(Error::shape("power_iteration", format!("{}x{} is not square", a.rows, a.cols)));
    }
    if x0.len() != a.rows {
        return Err(Error::shape(
            "power_iteration",
            format!("start vector of length {} for a {}x{} operator", x0.len(), a.rows, a.cols),
        ));
    }
    if max_iters == 0 {
        return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
    }
    let start_norm = x0.l1_norm();
    if start_norm == 0.0 {
        return Err(Error::InvalidArgument("start vector is zero".into()));
    }
    let mut v = x0.scale(1.0 / start_norm);
    let mut iters_used = 0;
    for _ in 0..max_iters {
        let w = a.matvec(&v)?;
        let norm = w.l1_norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::DegenerateOperator(format!(
                "A v has l1 norm {norm} at iteration {}",
                iters_used + 1
            )));
        }
        let next = w.scale(1.0 / norm);
        let change: f64 = next.iter().zip(v.iter()).map(|(a, b)| (a - b).abs()).sum();
        v = next;
        iters_used += 1;
        if change < tol {
            break;
        }
    }
    let lambda = a.matvec(&v)?.l1_norm();
    Ok(PowerIteration { v, lambda, iters_used })
}

/// [`power_iteration`] from the uniform start with the default cap and tolerance.
pub fn power_iteration_default(a: &Matrix) -> Result<PowerIteration> {
    power_iteration(a, &Vector::uniform(a.rows()), POWER_MAX_ITERS, POWER_TOL)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{eigen_oracle, random_matrix};

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_examples() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&a, &Matrix::identity(2)).unwrap(), a);
        let z = Matrix::zeros(2, 2);
        let b = m(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(matmul(&z, &b).unwrap(), z);
        let sq = matmul(&a, &a).unwrap();
        assert_eq!(sq, m(&[&[7.0, 10.0], &[15.0, 22.0]]));
        assert_eq!(sq, naive_matmul(&a, &a));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        for seed in 0..10 {
            let a = random_matrix(5, 7, seed, -1.0, 1.0);
            let b = random_matrix(7, 3, seed + 100, -1.0, 1.0);
            assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-14);
            let bt = b.transpose();
            assert!(matmul_transpose_b(&a, &bt).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-14);
        }
    }

    #[test]
    fn matmul_shape_error() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn matrix_new_validates() {
        assert!(matches!(Matrix::new(2, 2, vec![1.0; 3]), Err(Error::Shape { .. })));
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn solve_examples() {
        let b = m(&[&[3.0], &[4.0]]);
        assert_eq!(solve_linear(&Matrix::identity(2), &b).unwrap(), b);
        let a = m(&[&[2.0, 0.0], &[0.0, 4.0]]);
        let inv = solve_linear(&a, &Matrix::identity(2)).unwrap();
        assert_eq!(inv, m(&[&[0.5, 0.0], &[0.0, 0.25]]));
        let err = solve_linear(&m(&[&[1.0, 1.0], &[1.0, 1.0]]), &Matrix::identity(2)).unwrap_err();
        assert!(matches!(err, Error::Singular { .. }));
    }

    #[test]
    fn solve_needs_pivoting() {
        let a = m(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let x = solve_linear(&a, &Matrix::identity(2)).unwrap();
        assert_eq!(x, a);
    }

    #[test]
    fn solve_shape_errors() {
        assert!(matches!(
            solve_linear(&Matrix::zeros(2, 3), &Matrix::zeros(2, 1)),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            solve_linear(&Matrix::identity(2), &Matrix::zeros(3, 1)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(frobenius_norm(&m(&[&[3.0, 4.0], &[0.0, 0.0]])), 5.0);
        assert_eq!(frobenius_norm(&Matrix::zeros(3, 3)), 0.0);
        assert!((frobenius_norm(&Matrix::identity(2)) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn power_iteration_dominant_diagonal() {
        let a = m(&[&[2.0, 0.0], &[0.0, 1.0]]);
        let out = power_iteration(&a, &Vector::new(vec![1.0, 1.0]).unwrap(), 200, 1e-12).unwrap();
        assert!((out.v[0] - 1.0).abs() < 1e-11 && out.v[1].abs() < 1e-11);
        assert!((out.lambda - 2.0).abs() < 1e-11);
    }

    #[test]
    fn power_iteration_rank_one_single_step() {
        let a = m(&[&[1.0, 1.0], &[1.0, 1.0]]);
        let out = power_iteration_default(&a).unwrap();
        assert_eq!(out.v.as_slice(), &[0.5, 0.5]);
        assert_eq!(out.iters_used, 1);
        assert_eq!(out.lambda, 2.0);
    }

    #[test]
    fn power_iteration_nilpotent_is_degenerate() {
        let a = m(&[&[0.0, 0.3], &[0.0, 0.0]]);
        assert!(matches!(power_iteration_default(&a), Err(Error::DegenerateOperator(_))));
    }

    #[test]
    fn power_iteration_matches_eigensolver() {
        for seed in 0..20 {
            let a = random_matrix(8, 8, seed, 0.0, 1.0);
            let out = power_iteration_default(&a).unwrap();
            let (rho, v) = eigen_oracle(&a);
            let cos = out.v.dot(&v).unwrap() / (out.v.l2_norm() * v.l2_norm());
            assert!(cos >= 1.0 - 1e-9, "seed {seed}: cosine {cos}");
            assert!((out.lambda - rho).abs() <= 1e-10 * rho, "seed {seed}: {} vs {rho}", out.lambda);
            assert!((out.v.l1_norm() - 1.0).abs() < 1e-12);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn nonneg_square() -> impl Strategy<Value = Matrix> {
            (1usize..7).prop_flat_map(|n| {
                proptest::collection::vec(0.01f64..1.0, n * n)
                    .prop_map(move |d| Matrix::new(n, n, d).unwrap())
            })
        }

        proptest! {
            #[test]
            fn power_output_is_l1_unit_and_nonnegative(a in nonneg_square()) {
                let out = power_iteration_default(&a).unwrap();
                prop_assert!((out.v.l1_norm() - 1.0).abs() <= 1e-12);
                prop_assert!(out.v.iter().all(|&x| x >= 0.0));
            }

            #[test]
            fn solve_round_trips(seed in 0u64..1000, n in 1usize..9) {
                // Diagonally dominant, hence well conditioned.
                let mut a = random_matrix(n, n, seed, -1.0, 1.0);
                for i in 0..n { a[(i, i)] += n as f64 + 1.0; }
                let b = random_matrix(n, 3, seed + 1, -5.0, 5.0);
                let x = solve_linear(&a, &b).unwrap();
                let resid = matmul(&a, &x).unwrap().sub(&b).unwrap();
                prop_assert!(frobenius_norm(&resid) <= 1e-10 * frobenius_norm(&b).max(1e-300));
            }
        }
    }
}
