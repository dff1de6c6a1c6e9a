//! Multi-head attention, layer norm, MLP and the pre-LN block.

use super::linear::{linfsa_head_backward, linfsa_head_forward};
use super::pure::{pure_head_backward, pure_head_forward};
use super::{AttentionParams, BlockParams, Heads, LayerNormParams, MlpParams, MultiHeadConfig, Variant};
use crate::error::{Error, Result};
use crate::graph::{gelu, gelu_derivative, TokenFeatures};
use crate::path::{layerwise_accumulate, DecayFactor};
use crate::tensor::{matmul, Matrix, Vector};

/// Lower bound on the per-token standard deviation in layer norm.
pub const LAYER_NORM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// Output-projected result, `N × d_model`.
    pub out: Matrix,
    /// Concatenated head outputs before projection.
    pub concat: Matrix,
    /// Linear heads whose weights fell back to uniform.
    pub degenerate_heads: usize,
}

fn head_width(heads: &Heads) -> Result<usize> {
    let w = match heads {
        Heads::Linear(h) => h.first().map(|p| p.d_h()),
        Heads::Pure(h) => h.first().map(|p| p.d_h()),
    };
    w.ok_or_else(|| Error::Config("attention needs at least one head".into()))
}

fn check_projection(op: &'static str, params: &AttentionParams, concat_width: usize, d_in: usize) -> Result<()> {
    if params.w_o.shape() != (concat_width, d_in) || params.b_o.len() != d_in {
        return Err(Error::shape(
            op,
            format!("output projection {:?} for {concat_width} concatenated features", params.w_o.shape()),
        ));
    }
    Ok(())
}

fn add_bias(m: &mut Matrix, b: &Vector) {
    for i in 0..m.rows() {
        for (x, bj) in m.row_mut(i).iter_mut().zip(b.iter()) {
            *x += bj;
        }
    }
}

/// Every head on `u`, concatenated, then `W_O` and `b_O`.
pub fn attention_forward(u: &Matrix, params: &AttentionParams) -> Result<AttentionOutput> {
    let dh = head_width(&params.heads)?;
    let n = u.rows();
    let width = dh * params.heads.len();
    check_projection("attention_forward", params, width, u.cols())?;
    let x = TokenFeatures::new(u.clone());
    let mut concat = Matrix::zeros(n, width);
    let mut degenerate_heads = 0;
    match &params.heads {
        Heads::Linear(hs) => {
            for (idx, p) in hs.iter().enumerate() {
                let o = linfsa_head_forward(&x, p)?;
                degenerate_heads += usize::from(o.degenerate);
                concat.set_column_block(idx * dh, &o.broadcast(n));
            }
        }
        Heads::Pure(hs) => {
            for (idx, p) in hs.iter().enumerate() {
                concat.set_column_block(idx * dh, &pure_head_forward(&x, p)?);
            }
        }
    }
    let mut out = matmul(&concat, &params.w_o)?;
    add_bias(&mut out, &params.b_o);
    Ok(AttentionOutput {
        out,
        concat,
        degenerate_heads,
    })
}

/// Given `d_out`, returns `(dU, gradients)`; head gradients are merged in head order.
pub fn attention_backward(u: &Matrix, params: &AttentionParams, d_out: &Matrix) -> Result<(Matrix, AttentionParams)> {
    let fwd = attention_forward(u, params)?;
    if d_out.shape() != fwd.out.shape() {
        return Err(Error::shape("attention_backward", format!("upstream {:?} vs output {:?}", d_out.shape(), fwd.out.shape())));
    }
    let dh = head_width(&params.heads)?;
    let d_concat = matmul(d_out, &params.w_o.transpose())?;
    let w_o = matmul(&fwd.concat.transpose(), d_out)?;
    let b_o = d_out.col_sums();
    let x = TokenFeatures::new(u.clone());
    let mut du = Matrix::zeros(u.rows(), u.cols());
    let heads = match &params.heads {
        Heads::Linear(hs) => {
            let mut grads = Vec::with_capacity(hs.len());
            for (idx, p) in hs.iter().enumerate() {
                let d_head = d_concat.column_block(idx * dh, dh).col_sums();
                let (dx, g) = linfsa_head_backward(&x, p, d_head.as_slice())?;
                du.axpy(1.0, &dx)?;
                grads.push(g);
            }
            Heads::Linear(grads)
        }
        Heads::Pure(hs) => {
            let mut grads = Vec::with_capacity(hs.len());
            for (idx, p) in hs.iter().enumerate() {
                let (dx, g) = pure_head_backward(&x, p, &d_concat.column_block(idx * dh, dh))?;
                du.axpy(1.0, &dx)?;
                grads.push(g);
            }
            Heads::Pure(grads)
        }
    };
    Ok((du, AttentionParams { heads, w_o, b_o }))
}

struct NormRow {
    xhat: Vec<f64>,
    sigma: f64,
    floored: bool,
}

fn normalize_row(row: &[f64]) -> NormRow {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
    let sd = var.sqrt();
    let floored = sd <= LAYER_NORM_FLOOR;
    let sigma = if floored { LAYER_NORM_FLOOR } else { sd };
    NormRow {
        xhat: row.iter().map(|x| (x - mean) / sigma).collect(),
        sigma,
        floored,
    }
}

fn check_ln(op: &'static str, x: &Matrix, p: &LayerNormParams) -> Result<()> {
    if p.scale.len() != x.cols() || p.shift.len() != x.cols() || x.cols() == 0 {
        return Err(Error::shape(op, format!("width {} with {} scales", x.cols(), p.scale.len())));
    }
    Ok(())
}

/// Per-token layer norm `(x − μ)/max(σ, floor) ⊙ scale + shift`.
pub fn layer_norm(x: &Matrix, p: &LayerNormParams) -> Result<Matrix> {
    check_ln("layer_norm", x, p)?;
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let nr = normalize_row(x.row(i));
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = nr.xhat[j] * p.scale[j] + p.shift[j];
        }
    }
    Ok(out)
}

pub fn layer_norm_backward(x: &Matrix, p: &LayerNormParams, dy: &Matrix) -> Result<(Matrix, LayerNormParams)> {
    check_ln("layer_norm_backward", x, p)?;
    if dy.shape() != x.shape() {
        return Err(Error::shape("layer_norm_backward", "upstream shape differs from input"));
    }
    let d = x.cols();
    let mut dx = Matrix::zeros(x.rows(), d);
    let mut scale = Vector::zeros(d);
    let mut shift = Vector::zeros(d);
    for i in 0..x.rows() {
        let nr = normalize_row(x.row(i));
        let dyi = dy.row(i);
        let dxhat: Vec<f64> = (0..d).map(|j| dyi[j] * p.scale[j]).collect();
        for j in 0..d {
            scale[j] += dyi[j] * nr.xhat[j];
            shift[j] += dyi[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = if nr.floored {
            0.0
        } else {
            dxhat.iter().zip(&nr.xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64
        };
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = (dxhat[j] - mean_d - nr.xhat[j] * mean_dx) / nr.sigma;
        }
    }
    Ok((dx, LayerNormParams { scale, shift }))
}

fn check_mlp(op: &'static str, u: &Matrix, p: &MlpParams) -> Result<()> {
    let h = p.w1.cols();
    if p.w1.rows() != u.cols() || p.b1.len() != h || p.w2.rows() != h || p.b2.len() != p.w2.cols() {
        return Err(Error::shape(op, format!("input {:?}, w1 {:?}, w2 {:?}", u.shape(), p.w1.shape(), p.w2.shape())));
    }
    Ok(())
}

/// `GELU(U W₁ + b₁) W₂ + b₂`.
pub fn mlp_forward(u: &Matrix, p: &MlpParams) -> Result<Matrix> {
    check_mlp("mlp_forward", u, p)?;
    let mut h = matmul(u, &p.w1)?;
    add_bias(&mut h, &p.b1);
    let mut out = matmul(&h.map(gelu), &p.w2)?;
    add_bias(&mut out, &p.b2);
    Ok(out)
}

pub fn mlp_backward(u: &Matrix, p: &MlpParams, dm: &Matrix) -> Result<(Matrix, MlpParams)> {
    check_mlp("mlp_backward", u, p)?;
    let mut h = matmul(u, &p.w1)?;
    add_bias(&mut h, &p.b1);
    let g = h.map(gelu);
    if dm.shape() != (u.rows(), p.w2.cols()) {
        return Err(Error::shape("mlp_backward", "upstream shape differs from output"));
    }
    let dg = matmul(dm, &p.w2.transpose())?;
    let dh = Matrix::from_fn(h.rows(), h.cols(), |i, j| dg[(i, j)] * gelu_derivative(h[(i, j)]));
    let grads = MlpParams {
        w1: matmul(&u.transpose(), &dh)?,
        b1: dh.col_sums(),
        w2: matmul(&g.transpose(), dm)?,
        b2: dm.col_sums(),
    };
    Ok((matmul(&dh, &p.w1.transpose())?, grads))
}

struct BlockForward {
    u1: Matrix,
    attn: AttentionOutput,
    y: Matrix,
    u2: Matrix,
    out: Matrix,
}

fn block_forward_full(x: &Matrix, params: &BlockParams) -> Result<BlockForward> {
    let u1 = layer_norm(x, &params.ln1)?;
    let attn = attention_forward(&u1, &params.attention)?;
    let y = x.add(&attn.out)?;
    let u2 = layer_norm(&y, &params.ln2)?;
    let out = y.add(&mlp_forward(&u2, &params.mlp)?)?;
    Ok(BlockForward { u1, attn, y, u2, out })
}

fn check_block(cfg: &MultiHeadConfig, params: &BlockParams, x: &Matrix) -> Result<()> {
    MultiHeadConfig::new(cfg.n_heads, cfg.d_h, cfg.d_model)?;
    params.validate(cfg)?;
    if x.cols() != cfg.d_model {
        return Err(Error::shape("block", format!("input width {} for d_model {}", x.cols(), cfg.d_model)));
    }
    Ok(())
}

/// Pre-LN block: `Y = X + Attn(LN₁(X))`, `out = Y + MLP(LN₂(Y))`.
pub fn multihead_block_forward(
    x: &TokenFeatures,
    cfg: &MultiHeadConfig,
    params: &BlockParams,
    variant: Variant,
) -> Result<TokenFeatures> {
    check_block(cfg, params, x.matrix())?;
    if params.variant() != variant {
        return Err(Error::Config(format!("{variant} block requested with {} heads", params.variant())));
    }
    Ok(TokenFeatures::new(block_forward_full(x.matrix(), params)?.out))
}

/// Given `d_out`, returns `(dX, gradients)` for the whole block.
pub fn block_backward(
    x: &TokenFeatures,
    cfg: &MultiHeadConfig,
    params: &BlockParams,
    d_out: &Matrix,
) -> Result<(Matrix, BlockParams)> {
    let x = x.matrix();
    check_block(cfg, params, x)?;
    if d_out.shape() != x.shape() {
        return Err(Error::shape("block_backward", "upstream shape differs from input"));
    }
    let f = block_forward_full(x, params)?;
    debug_assert_eq!(f.out.shape(), x.shape());
    let (du2, mlp) = mlp_backward(&f.u2, &params.mlp, d_out)?;
    let (dy_ln, ln2) = layer_norm_backward(&f.y, &params.ln2, &du2)?;
    let dy = d_out.add(&dy_ln)?;
    debug_assert_eq!(f.attn.out.shape(), dy.shape());
    let (du1, attention) = attention_backward(&f.u1, &params.attention, &dy)?;
    let (dx_ln, ln1) = layer_norm_backward(x, &params.ln1, &du1)?;
    let dx = dy.add(&dx_ln)?;
    Ok((dx, BlockParams { attention, ln1, ln2, mlp }))
}

/// Pure-InfSA attention sublayer on `x` with no norm or residual.
pub fn pure_infsa_layer(x: &TokenFeatures, params: &BlockParams) -> Result<Matrix> {
    if params.variant() != Variant::Pure {
        return Err(Error::Config("pure_infsa_layer needs pure heads".into()));
    }
    Ok(attention_forward(x.matrix(), &params.attention)?.out)
}

#[derive(Debug, Clone)]
pub struct StackOutput {
    pub output: Matrix,
    /// `S_L = Σ γˡ Z⁽ˡ⁾` over the attention sublayer outputs.
    pub accumulated: Matrix,
    pub layer_outputs: Vec<Matrix>,
}

/// Runs pure blocks in sequence and accumulates their attention outputs.
pub fn pure_stack_forward(
    x: &TokenFeatures,
    cfg: &MultiHeadConfig,
    blocks: &[BlockParams],
    gamma: DecayFactor,
) -> Result<StackOutput> {
    let mut h = x.matrix().clone();
    let mut layer_outputs = Vec::with_capacity(blocks.len());
    for b in blocks {
        check_block(cfg, b, &h)?;
        if b.variant() != Variant::Pure {
            return Err(Error::Config("pure stack contains a linear block".into()));
        }
        let f = block_forward_full(&h, b)?;
        layer_outputs.push(f.attn.out);
        h = f.out;
    }
    let accumulated = layerwise_accumulate(&layer_outputs, gamma)?;
    Ok(StackOutput {
        output: h,
        accumulated,
        layer_outputs,
    })
}
