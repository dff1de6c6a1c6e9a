//! Pure InfSA: full `N × N` Frobenius-normalized attention per head.

use super::PureHeadParams;
use crate::error::{Error, Result};
use crate::graph::TokenFeatures;
use crate::tensor::{dot, frobenius_norm, matmul, matmul_transpose_b, Matrix};

struct Projections {
    q: Matrix,
    k: Matrix,
    v: Matrix,
}

fn project(op: &'static str, x: &Matrix, p: &PureHeadParams) -> Result<Projections> {
    let shape = p.w_q.shape();
    if x.cols() != shape.0 || p.w_k.shape() != shape || p.w_v.shape() != shape {
        return Err(Error::shape(
            op,
            format!(
                "input {:?} with projections {:?}/{:?}/{:?}",
                x.shape(),
                shape,
                p.w_k.shape(),
                p.w_v.shape()
            ),
        ));
    }
    Ok(Projections {
        q: matmul(x, &p.w_q)?,
        k: matmul(x, &p.w_k)?,
        v: matmul(x, &p.w_v)?,
    })
}

/// `Z = Â V` with `Â = φ(QKᵀ)/(‖φ(QKᵀ)‖_F + ε)`.
pub fn pure_head_forward(x: &TokenFeatures, params: &PureHeadParams) -> Result<Matrix> {
    let pr = project("pure_head_forward", x.matrix(), params)?;
    let raw = matmul_transpose_b(&pr.q, &pr.k)?;
    let gated = raw.map(|s| params.activation.apply(s));
    let a_hat = gated.scale(1.0 / (frobenius_norm(&gated) + params.epsilon));
    matmul(&a_hat, &pr.v)
}

/// Given `dZ`, returns `(dX, gradients)` for one head.
pub fn pure_head_backward(
    x: &TokenFeatures,
    params: &PureHeadParams,
    dz: &Matrix,
) -> Result<(Matrix, PureHeadParams)> {
    let x = x.matrix();
    let pr = project("pure_head_backward", x, params)?;
    if dz.shape() != pr.v.shape() {
        return Err(Error::shape("pure_head_backward", format!("upstream {:?} vs output {:?}", dz.shape(), pr.v.shape())));
    }
    let act = params.activation;
    let raw = matmul_transpose_b(&pr.q, &pr.k)?;
    let gated = raw.map(|s| act.apply(s));
    let f = frobenius_norm(&gated);
    let denom = f + params.epsilon;
    let a_hat = gated.scale(1.0 / denom);

    let da_hat = matmul_transpose_b(dz, &pr.v)?;
    let dv = matmul(&a_hat.transpose(), dz)?;
    let g = dot(da_hat.data(), gated.data());
    let norm_coef = if f > 0.0 { g / (denom * denom * f) } else { 0.0 };
    let n = raw.rows();
    let draw = Matrix::from_fn(n, n, |i, j| {
        let dr = da_hat[(i, j)] / denom - norm_coef * gated[(i, j)];
        dr * act.derivative(raw[(i, j)])
    });
    let dq = matmul(&draw, &pr.k)?;
    let dk = matmul(&draw.transpose(), &pr.q)?;

    let xt = x.transpose();
    let grads = PureHeadParams {
        w_q: matmul(&xt, &dq)?,
        w_k: matmul(&xt, &dk)?,
        w_v: matmul(&xt, &dv)?,
        epsilon: params.epsilon,
        activation: params.activation,
    };
    let mut dx = matmul(&dq, &params.w_q.transpose())?;
    dx.axpy(1.0, &matmul(&dk, &params.w_k.transpose())?)?;
    dx.axpy(1.0, &matmul(&dv, &params.w_v.transpose())?)?;
    Ok((dx, grads))
}

/// Output of the memory-lean pure kernel.
#[derive(Debug, Clone)]
pub struct StreamedHead {
    pub z: Matrix,
    /// `‖φ(QKᵀ)‖_F`; the normalized operator has norm `f / (f + ε)`.
    pub frobenius: f64,
}

/// Pure-InfSA head on precomputed `q`, `k`, `v` that never stores `Â`.
///
/// Rows of `φ(QKᵀ)` are produced one at a time; unnormalized outputs and
/// the squared norm accumulate in the same pass, and the division by
/// `‖·‖_F + ε` happens once at the end. Work is `O(N² d)`, memory `O(N d)`.
pub fn pure_head_streamed(q: &Matrix, k: &Matrix, v: &Matrix, epsilon: f64) -> Result<StreamedHead> {
    let n = q.rows();
    if k.shape() != q.shape() || v.rows() != n {
        return Err(Error::shape(
            "pure_head_streamed",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let dv = v.cols();
    let mut z = Matrix::zeros(n, dv);
    let mut row = vec![0.0; n];
    let mut sq = 0.0;
    for i in 0..n {
        let qi = q.row(i);
        for (j, r) in row.iter_mut().enumerate() {
            *r = dot(qi, k.row(j)).max(0.0);
            sq += *r * *r;
        }
        let zi = z.row_mut(i);
        for (j, &r) in row.iter().enumerate() {
            if r != 0.0 {
                for (o, x) in zi.iter_mut().zip(v.row(j)) {
                    *o += r * x;
                }
            }
        }
    }
    let frobenius = sq.sqrt();
    let inv = 1.0 / (frobenius + epsilon);
    for x in z.data_mut() {
        *x *= inv;
    }
    Ok(StreamedHead { z, frobenius })
}
