//! Test-only fixtures and oracles.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Matrix, Vector};

pub fn random_matrix(rows: usize, cols: usize, seed: u64, lo: f64, hi: f64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(lo..hi))
}

/// Spectral radius and ℓ1-normalized dominant eigenvector from a dense
/// eigensolver: Schur eigenvalues, then the null vector of `A − λI` via SVD.
pub fn eigen_oracle(a: &Matrix) -> (f64, Vector) {
    let n = a.rows();
    let m = DMatrix::from_row_slice(n, n, a.data());
    let rho_c = m
        .complex_eigenvalues()
        .iter()
        .copied()
        .max_by(|x, y| x.norm().total_cmp(&y.norm()))
        .unwrap();
    let rho = rho_c.re;
    let shifted = &m - DMatrix::identity(n, n) * rho;
    let svd = shifted.svd(false, true);
    let vt = svd.v_t.unwrap();
    let (idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .unwrap();
    let mut v: Vec<f64> = vt.row(idx).iter().copied().collect();
    let sign = if v.iter().sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
    let l1: f64 = v.iter().map(|x| x.abs()).sum();
    for x in &mut v {
        *x *= sign / l1;
    }
    (rho, Vector::new(v).unwrap())
}
