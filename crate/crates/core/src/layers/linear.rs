//! Linear InfSA: one shared weight vector per head, computed in O(N·d).

use log::warn;

use super::LinfsaHeadParams;
use crate::error::{Error, Result};
use crate::graph::TokenFeatures;
use crate::tensor::{dot, matmul, Matrix, Vector};

/// Intermediate values of the weight pipeline, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct WeightsTrace {
    /// Query norms `eᵢ = ‖Qᵢ‖₂`.
    pub energies: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Central query `q̄ = Σ αᵢ Qᵢ`.
    pub central: Vec<f64>,
    /// Raw scores `q̄·Qⱼ` before gating.
    pub raw_scores: Vec<f64>,
    pub scores: Vec<f64>,
    pub a: Vector,
    /// All gated scores vanished and `a` fell back to uniform.
    pub degenerate: bool,
    epsilon: f64,
}

/// Runs the weight pipeline `e → α → q̄ → S → a` on query rows `q`.
pub fn linfsa_weights_trace(q: &Matrix, epsilon: f64) -> Result<WeightsTrace> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let (n, d) = q.shape();
    if n == 0 || d == 0 {
        return Err(Error::shape("linfsa_weights", format!("empty query matrix {n}x{d}")));
    }
    let energies: Vec<f64> = (0..n).map(|i| dot(q.row(i), q.row(i)).sqrt()).collect();
    let denom = energies.iter().sum::<f64>() + epsilon;
    let alpha: Vec<f64> = energies.iter().map(|e| e / denom).collect();
    let mut central = vec![0.0; d];
    for (i, &w) in alpha.iter().enumerate() {
        for (c, x) in central.iter_mut().zip(q.row(i)) {
            *c += w * x;
        }
    }
    let raw_scores: Vec<f64> = (0..n).map(|j| dot(&central, q.row(j))).collect();
    let scores: Vec<f64> = raw_scores.iter().map(|s| s.max(0.0)).collect();
    let total: f64 = scores.iter().sum();
    let degenerate = total == 0.0;
    let a = if degenerate {
        warn!("linear attention scores vanished for all {n} tokens; using uniform weights");
        Vector::uniform(n)
    } else {
        let denom = total + epsilon;
        Vector::from_vec(scores.iter().map(|s| s / denom).collect())
    };
    Ok(WeightsTrace {
        energies,
        alpha,
        central,
        raw_scores,
        scores,
        a,
        degenerate,
        epsilon,
    })
}

/// Position-shared attention weights `a` for tied queries and keys.
pub fn linfsa_weights(q: &TokenFeatures, epsilon: f64) -> Result<Vector> {
    Ok(linfsa_weights_trace(q.matrix(), epsilon)?.a)
}

/// Gradient of `⟨da, a⟩` with respect to the query rows.
pub fn linfsa_weights_backward(q: &Matrix, trace: &WeightsTrace, da: &[f64]) -> Result<Matrix> {
    let (n, d) = q.shape();
    if da.len() != n || trace.a.len() != n {
        return Err(Error::shape("linfsa_weights_backward", format!("{} weights for {n} tokens", da.len())));
    }
    let mut dq = Matrix::zeros(n, d);
    if trace.degenerate {
        return Ok(dq);
    }
    let t = trace.scores.iter().sum::<f64>() + trace.epsilon;
    let proj = dot(da, trace.a.as_slice());
    let ds: Vec<f64> = (0..n)
        .map(|j| {
            if trace.raw_scores[j] > 0.0 {
                (da[j] - proj) / t
            } else {
                0.0
            }
        })
        .collect();

    let mut dcentral = vec![0.0; d];
    for j in 0..n {
        let row = dq.row_mut(j);
        for (k, (r, c)) in row.iter_mut().zip(&trace.central).enumerate() {
            *r += ds[j] * c;
            dcentral[k] += ds[j] * q[(j, k)];
        }
    }

    let e_denom = trace.energies.iter().sum::<f64>() + trace.epsilon;
    let dalpha: Vec<f64> = (0..n).map(|i| dot(q.row(i), &dcentral)).collect();
    let dalpha_proj = dot(&dalpha, &trace.alpha);
    for i in 0..n {
        let de = (dalpha[i] - dalpha_proj) / e_denom;
        let e = trace.energies[i];
        let alpha = trace.alpha[i];
        let norm_coef = if e > 0.0 { de / e } else { 0.0 };
        let qi: Vec<f64> = q.row(i).to_vec();
        for ((r, dc), x) in dq.row_mut(i).iter_mut().zip(&dcentral).zip(&qi) {
            *r += alpha * dc + norm_coef * x;
        }
    }
    Ok(dq)
}

#[derive(Debug, Clone)]
pub struct LinfsaHeadOutput {
    /// Pooled context `h = Vᵀ(γa)`, shared by every token.
    pub h: Vector,
    pub a: Vector,
    pub degenerate: bool,
}

impl LinfsaHeadOutput {
    /// The head's token-output matrix: `h` repeated at each of `n` positions.
    pub fn broadcast(&self, n: usize) -> Matrix {
        let h = self.h.as_slice();
        Matrix::from_fn(n, h.len(), |_, j| h[j])
    }
}

fn check_head_input(op: &'static str, x: &Matrix, params: &LinfsaHeadParams) -> Result<()> {
    if x.cols() != params.w_q.rows() || params.w_q.shape() != params.w_v.shape() {
        return Err(Error::shape(
            op,
            format!(
                "input {:?} with projections {:?}/{:?}",
                x.shape(),
                params.w_q.shape(),
                params.w_v.shape()
            ),
        ));
    }
    Ok(())
}

/// Forward pass of one head on token features `x` (`N × d_model`).
pub fn linfsa_head_forward(x: &TokenFeatures, params: &LinfsaHeadParams) -> Result<LinfsaHeadOutput> {
    let x = x.matrix();
    check_head_input("linfsa_head_forward", x, params)?;
    let q = matmul(x, &params.w_q)?;
    let v = matmul(x, &params.w_v)?;
    let trace = linfsa_weights_trace(&q, params.epsilon)?;
    let w = trace.a.scale(params.gamma);
    let h = v.transpose().matvec(&w)?;
    Ok(LinfsaHeadOutput {
        h,
        a: trace.a,
        degenerate: trace.degenerate,
    })
}

/// Given `dh = ∂L/∂h`, returns `(dX, dW_Q, dW_V)`.
pub fn linfsa_head_backward(
    x: &TokenFeatures,
    params: &LinfsaHeadParams,
    dh: &[f64],
) -> Result<(Matrix, LinfsaHeadParams)> {
    let x = x.matrix();
    check_head_input("linfsa_head_backward", x, params)?;
    if dh.len() != params.d_h() {
        return Err(Error::shape("linfsa_head_backward", format!("{} upstream values for d_h = {}", dh.len(), params.d_h())));
    }
    let n = x.rows();
    let q = matmul(x, &params.w_q)?;
    let v = matmul(x, &params.w_v)?;
    let trace = linfsa_weights_trace(&q, params.epsilon)?;
    let g = params.gamma;

    let dv = Matrix::from_fn(n, dh.len(), |t, j| g * trace.a[t] * dh[j]);
    let da: Vec<f64> = (0..n).map(|t| g * dot(v.row(t), dh)).collect();
    let dq = linfsa_weights_backward(&q, &trace, &da)?;

    let xt = x.transpose();
    let grads = LinfsaHeadParams {
        w_q: matmul(&xt, &dq)?,
        w_v: matmul(&xt, &dv)?,
        gamma: params.gamma,
        epsilon: params.epsilon,
    };
    let mut dx = matmul(&dq, &params.w_q.transpose())?;
    dx.axpy(1.0, &matmul(&dv, &params.w_v.transpose())?)?;
    Ok((dx, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Init;
    use crate::testutil::random_matrix;
    use proptest::prelude::*;

    fn tf(rows: &[&[f64]]) -> TokenFeatures {
        TokenFeatures::new(Matrix::from_rows(rows).unwrap())
    }

    #[test]
    fn identical_rows_give_uniform_weights() {
        let a = linfsa_weights(&tf(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]), 1e-6).unwrap();
        for x in a.iter() {
            assert!((x - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn hand_worked_pipeline() {
        let t = linfsa_weights_trace(&Matrix::from_rows(&[&[10.0, 0.0], &[0.1, 0.0]]).unwrap(), 1e-6).unwrap();
        assert!((t.energies[0] - 10.0).abs() < 1e-12 && (t.energies[1] - 0.1).abs() < 1e-12);
        assert!((t.alpha[0] - 0.99010).abs() < 1e-5 && (t.alpha[1] - 0.00990).abs() < 1e-5);
        assert!((t.central[0] - 9.90198).abs() < 1e-5 && t.central[1] == 0.0);
        assert!((t.scores[0] - 99.01980).abs() < 1e-4 && (t.scores[1] - 0.99020).abs() < 1e-5);
        assert!((t.a[0] - 0.99010).abs() < 1e-5 && (t.a[1] - 0.00990).abs() < 1e-5);
        assert!(!t.degenerate);
        // a is proportional to S
        assert!((t.a[0] / t.a[1] - t.scores[0] / t.scores[1]).abs() < 1e-9);
    }

    #[test]
    fn cancellation_falls_back_to_uniform() {
        let t = linfsa_weights_trace(&Matrix::from_rows(&[&[1.0, 0.0], &[-1.0, 0.0]]).unwrap(), 1e-6).unwrap();
        assert!(t.degenerate);
        assert_eq!(t.a.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn uniform_weights_identical_values() {
        // Identical token rows make a uniform and every value row equal.
        let x = tf(&[&[0.3, -0.2, 0.5], &[0.3, -0.2, 0.5], &[0.3, -0.2, 0.5]]);
        let p = Init::new(4).linear_head(3, 2, 0.7, 1e-6);
        let out = linfsa_head_forward(&x, &p).unwrap();
        let v0 = matmul(x.matrix(), &p.w_v).unwrap();
        for j in 0..2 {
            assert!((out.h[j] - 0.7 * v0[(0, j)]).abs() < 1e-6 * v0[(0, j)].abs().max(1.0));
        }
    }

    #[test]
    fn vanishing_gamma_limit() {
        let x = TokenFeatures::new(random_matrix(5, 4, 2, -1.0, 1.0));
        let mut p = Init::new(2).linear_head(4, 3, 0.7, 1e-6);
        p.gamma = 0.0;
        let out = linfsa_head_forward(&x, &p).unwrap();
        assert!(out.h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_matches_matmul_oracle() {
        let x = random_matrix(5, 4, 9, -1.0, 1.0);
        let p = Init::new(9).linear_head(4, 3, 0.7, 1e-6);
        let out = linfsa_head_forward(&TokenFeatures::new(x.clone()), &p).unwrap();
        let v = matmul(&x, &p.w_v).unwrap();
        for j in 0..3 {
            let mut acc = 0.0;
            for t in 0..5 {
                acc += v[(t, j)] * (0.7 * out.a[t]);
            }
            assert_eq!(out.h[j], acc);
        }
    }

    #[test]
    fn broadcast_is_rank_one() {
        let x = TokenFeatures::new(random_matrix(6, 4, 3, -1.0, 1.0));
        let p = Init::new(3).linear_head(4, 2, 0.7, 1e-6);
        let out = linfsa_head_forward(&x, &p).unwrap();
        let m = out.broadcast(6);
        for i in 1..6 {
            assert_eq!(m.row(i), m.row(0));
        }
    }

    #[test]
    fn shape_errors() {
        let x = TokenFeatures::new(Matrix::zeros(3, 5));
        let p = Init::new(1).linear_head(4, 2, 0.7, 1e-6);
        assert!(matches!(linfsa_head_forward(&x, &p), Err(Error::Shape { .. })));
        assert!(linfsa_weights(&TokenFeatures::new(Matrix::zeros(0, 2)), 1e-6).is_err());
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(seed in 0u64..10_000, n in 1usize..12, d in 1usize..6) {
            let q = random_matrix(n, d, seed, 0.0, 1.0);
            let t = linfsa_weights_trace(&q, 1e-6).unwrap();
            prop_assert!(t.a.iter().all(|&x| x >= 0.0));
            if !t.degenerate {
                // The ε floor leaves a deficit of exactly ε/(ΣS + ε).
                let total: f64 = t.scores.iter().sum();
                let deficit = 1.0 - t.a.sum();
                prop_assert!((deficit - 1e-6 / (total + 1e-6)).abs() < 1e-12);
                if total >= 0.1 {
                    prop_assert!(deficit.abs() <= 10.0 * 1e-6 * n as f64);
                }
            }
        }

        #[test]
        fn permutation_equivariance(seed in 0u64..10_000, shift in 1usize..5) {
            let n = 6;
            let x = random_matrix(n, 4, seed, -1.0, 1.0);
            let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
            let xp = Matrix::from_fn(n, 4, |i, j| x[(perm[i], j)]);
            let p = Init::new(seed).linear_head(4, 3, 0.7, 1e-6);
            let a = linfsa_head_forward(&TokenFeatures::new(x), &p).unwrap();
            let b = linfsa_head_forward(&TokenFeatures::new(xp), &p).unwrap();
            for i in 0..n {
                prop_assert!((b.a[i] - a.a[perm[i]]).abs() < 1e-12);
            }
            prop_assert!(a.h.max_abs_diff(&b.h) < 1e-12);
        }

        #[test]
        fn scaling_preserves_ordering(seed in 0u64..10_000, c in 0.1f64..10.0) {
            let q = random_matrix(8, 4, seed, 0.0, 1.0);
            let a = linfsa_weights(&TokenFeatures::new(q.clone()), 1e-6).unwrap();
            let b = linfsa_weights(&TokenFeatures::new(q.scale(c)), 1e-6).unwrap();
            let order = |v: &Vector| {
                let mut idx: Vec<usize> = (0..v.len()).collect();
                idx.sort_by(|&i, &j| v[j].total_cmp(&v[i]).then(i.cmp(&j)));
                idx
            };
            // Ties within rounding may swap; compare through the values.
            let (oa, ob) = (order(&a), order(&b));
            for (i, j) in oa.iter().zip(&ob) {
                prop_assert!(i == j || (a[*i] - a[*j]).abs() < 1e-9);
            }
        }
    }
}
