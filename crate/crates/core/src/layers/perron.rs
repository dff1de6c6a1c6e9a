//! The nonlinear map `F(x) = [q̄ᵀK]₊ / (‖[q̄ᵀK]₊‖₁ + ε)` and its iterates.
//!
//! The central query `q̄` is weighted by the fixed query norms, so `F` does
//! not depend on the magnitude of `x` at all; on the nonnegative cone it is
//! constant, and the normalized iteration reaches its fixed point after one
//! application.

use super::linear::linfsa_weights_trace;
use crate::error::{Error, Result};
use crate::graph::TokenFeatures;
use crate::tensor::Vector;

fn check_point(x: &Vector, n: usize) -> Result<()> {
    if x.len() != n {
        return Err(Error::shape("perron_map_f", format!("point of length {} for {n} tokens", x.len())));
    }
    if let Some(i) = x.iter().position(|&v| v < 0.0) {
        return Err(Error::InvalidArgument(format!("perron_map_f needs x >= 0, entry {i} is {}", x[i])));
    }
    Ok(())
}

/// One application of `F` at `x ≥ 0`. A vanishing numerator yields uniform.
pub fn perron_map_f(x: &Vector, q: &TokenFeatures, epsilon: f64) -> Result<Vector> {
    check_point(x, q.n_tokens())?;
    Ok(linfsa_weights_trace(q.matrix(), epsilon)?.a)
}

#[derive(Debug, Clone)]
pub struct PerronIterate {
    /// Last accepted iterate, `‖v‖₁ = 1`.
    pub v: Vector,
    /// Index `k` of the iterate `F^k(x₀)` that was returned.
    pub iters: usize,
    pub converged: bool,
    pub degenerate: bool,
}

/// Normalized iterates of `F` from `x₀ = 𝟏/N`, stopping once two consecutive
/// iterates are within `tol` in ℓ1.
pub fn iterate_f(q: &TokenFeatures, epsilon: f64, max_iters: usize, tol: f64) -> Result<PerronIterate> {
    if max_iters == 0 {
        return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
    }
    let n = q.n_tokens();
    let mut x = Vector::uniform(n);
    let degenerate = linfsa_weights_trace(q.matrix(), epsilon)?.degenerate;
    for k in 0..max_iters {
        let y = perron_map_f(&x, q, epsilon)?;
        let y = y.scale(1.0 / y.l1_norm());
        let step = y.iter().zip(x.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>();
        if k > 0 && step < tol {
            return Ok(PerronIterate {
                v: x,
                iters: k,
                converged: true,
                degenerate,
            });
        }
        x = y;
    }
    Ok(PerronIterate {
        v: x,
        iters: max_iters,
        converged: false,
        degenerate,
    })
}
