//! Pure and Linear InfSA attention inside a pre-LN transformer block.
//!
//! Every differentiable operation here has a hand-derived backward pass;
//! [`crate::validation`] checks each of them against central differences.

mod block;
mod linear;
mod perron;
mod pure;

pub use block::{
    attention_backward, attention_forward, block_backward, layer_norm, layer_norm_backward, mlp_backward,
    mlp_forward, multihead_block_forward, pure_infsa_layer, pure_stack_forward, AttentionOutput, StackOutput,
    LAYER_NORM_FLOOR,
};
pub use linear::{
    linfsa_head_backward, linfsa_head_forward, linfsa_weights, linfsa_weights_backward, linfsa_weights_trace,
    LinfsaHeadOutput, WeightsTrace,
};
pub use perron::{iterate_f, perron_map_f, PerronIterate};
pub use pure::{pure_head_backward, pure_head_forward, pure_head_streamed, StreamedHead};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Activation, DEFAULT_EPSILON};
use crate::tensor::{Matrix, Vector};

/// Default per-head context scaling `γ`.
pub const DEFAULT_GAMMA: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Pure,
    Linear,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Pure => "pure",
            Variant::Linear => "linear",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MultiHeadConfig {
    pub n_heads: usize,
    pub d_h: usize,
    pub d_model: usize,
}

impl MultiHeadConfig {
    pub fn new(n_heads: usize, d_h: usize, d_model: usize) -> Result<Self> {
        if n_heads == 0 || d_h == 0 {
            return Err(Error::Config("n_heads and d_h must be positive".into()));
        }
        if n_heads * d_h != d_model {
            return Err(Error::Config(format!(
                "n_heads * d_h = {n_heads} * {d_h} = {} but d_model = {d_model}",
                n_heads * d_h
            )));
        }
        Ok(Self { n_heads, d_h, d_model })
    }

    /// 64 heads of width 12 spanning a 768-dimensional model.
    pub fn wide() -> Self {
        Self {
            n_heads: 64,
            d_h: 12,
            d_model: 768,
        }
    }
}

/// One Linear-InfSA head. Queries and keys share `w_q`; values use `w_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinfsaHeadParams {
    pub w_q: Matrix,
    pub w_v: Matrix,
    pub gamma: f64,
    pub epsilon: f64,
}

impl LinfsaHeadParams {
    pub fn new(w_q: Matrix, w_v: Matrix, gamma: f64, epsilon: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1), got {gamma}")));
        }
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
        }
        if w_q.shape() != w_v.shape() || w_q.cols() == 0 {
            return Err(Error::shape(
                "LinfsaHeadParams",
                format!("w_q {:?} vs w_v {:?}", w_q.shape(), w_v.shape()),
            ));
        }
        Ok(Self { w_q, w_v, gamma, epsilon })
    }

    pub fn d_h(&self) -> usize {
        self.w_q.cols()
    }
}

/// One Pure-InfSA head with separate query, key and value projections.
#[derive(Debug, Clone, PartialEq)]
pub struct PureHeadParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub epsilon: f64,
    pub activation: Activation,
}

impl PureHeadParams {
    pub fn d_h(&self) -> usize {
        self.w_q.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Heads {
    Linear(Vec<LinfsaHeadParams>),
    Pure(Vec<PureHeadParams>),
}

impl Heads {
    pub fn variant(&self) -> Variant {
        match self {
            Heads::Linear(_) => Variant::Linear,
            Heads::Pure(_) => Variant::Pure,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Heads::Linear(h) => h.len(),
            Heads::Pure(h) => h.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Heads plus the output projection applied to their concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub heads: Heads,
    pub w_o: Matrix,
    pub b_o: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub scale: Vector,
    pub shift: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Matrix,
    pub b1: Vector,
    pub w2: Matrix,
    pub b2: Vector,
}

/// Parameters of one pre-LN block: `Y = X + Attn(LN₁(X))`, `out = Y + MLP(LN₂(Y))`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub attention: AttentionParams,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub mlp: MlpParams,
}

/// Flat access to the trainable tensors of a parameter container, in a
/// fixed order. Gradients use the same containers, so `flatten` on a
/// gradient lines up with `flatten` on the parameters.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |t| n += t.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        self.visit(&mut |t| out.extend_from_slice(t));
        out
    }

    fn load_flat(&mut self, theta: &[f64]) -> Result<()> {
        let expected = self.num_parameters();
        if theta.len() != expected {
            return Err(Error::shape(
                "load_flat",
                format!("{} values for {expected} parameters", theta.len()),
            ));
        }
        let mut offset = 0;
        self.visit_mut(&mut |t| {
            t.copy_from_slice(&theta[offset..offset + t.len()]);
            offset += t.len();
        });
        Ok(())
    }
}

impl Parameters for Matrix {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.data())
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.data_mut())
    }
}

impl Parameters for LinfsaHeadParams {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.w_q.data());
        f(self.w_v.data());
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.w_q.data_mut());
        f(self.w_v.data_mut());
    }
}

impl Parameters for PureHeadParams {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.w_q.data());
        f(self.w_k.data());
        f(self.w_v.data());
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.w_q.data_mut());
        f(self.w_k.data_mut());
        f(self.w_v.data_mut());
    }
}

impl Parameters for AttentionParams {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        match &self.heads {
            Heads::Linear(hs) => hs.iter().for_each(|h| h.visit(f)),
            Heads::Pure(hs) => hs.iter().for_each(|h| h.visit(f)),
        }
        f(self.w_o.data());
        f(self.b_o.as_slice());
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        match &mut self.heads {
            Heads::Linear(hs) => hs.iter_mut().for_each(|h| h.visit_mut(f)),
            Heads::Pure(hs) => hs.iter_mut().for_each(|h| h.visit_mut(f)),
        }
        f(self.w_o.data_mut());
        f(self.b_o.as_mut_slice());
    }
}

impl Parameters for LayerNormParams {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.scale.as_slice());
        f(self.shift.as_slice());
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.scale.as_mut_slice());
        f(self.shift.as_mut_slice());
    }
}

impl Parameters for MlpParams {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.w1.data());
        f(self.b1.as_slice());
        f(self.w2.data());
        f(self.b2.as_slice());
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.w1.data_mut());
        f(self.b1.as_mut_slice());
        f(self.w2.data_mut());
        f(self.b2.as_mut_slice());
    }
}

impl Parameters for BlockParams {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.attention.visit(f);
        self.ln1.visit(f);
        self.ln2.visit(f);
        self.mlp.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.attention.visit_mut(f);
        self.ln1.visit_mut(f);
        self.ln2.visit_mut(f);
        self.mlp.visit_mut(f);
    }
}

/// Seeded uniform initializer used for tests, gradient checks and the CLI.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn matrix(&mut self, rows: usize, cols: usize, scale: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.rng.gen_range(-scale..scale))
    }

    pub fn vector(&mut self, len: usize, center: f64, scale: f64) -> Vector {
        Vector::from_vec((0..len).map(|_| center + self.rng.gen_range(-scale..scale)).collect())
    }

    fn fan_in(&mut self, rows: usize, cols: usize) -> Matrix {
        self.matrix(rows, cols, 1.0 / (rows as f64).sqrt())
    }

    pub fn linear_head(&mut self, d_model: usize, d_h: usize, gamma: f64, epsilon: f64) -> LinfsaHeadParams {
        LinfsaHeadParams {
            w_q: self.fan_in(d_model, d_h),
            w_v: self.fan_in(d_model, d_h),
            gamma,
            epsilon,
        }
    }

    pub fn pure_head(&mut self, d_model: usize, d_h: usize, epsilon: f64) -> PureHeadParams {
        PureHeadParams {
            w_q: self.fan_in(d_model, d_h),
            w_k: self.fan_in(d_model, d_h),
            w_v: self.fan_in(d_model, d_h),
            epsilon,
            activation: Activation::Relu,
        }
    }

    pub fn attention(&mut self, cfg: &MultiHeadConfig, variant: Variant, gamma: f64, epsilon: f64) -> AttentionParams {
        let heads = match variant {
            Variant::Linear => Heads::Linear(
                (0..cfg.n_heads)
                    .map(|_| self.linear_head(cfg.d_model, cfg.d_h, gamma, epsilon))
                    .collect(),
            ),
            Variant::Pure => Heads::Pure(
                (0..cfg.n_heads)
                    .map(|_| self.pure_head(cfg.d_model, cfg.d_h, epsilon))
                    .collect(),
            ),
        };
        AttentionParams {
            heads,
            w_o: self.fan_in(cfg.d_model, cfg.d_model),
            b_o: self.vector(cfg.d_model, 0.0, 0.1),
        }
    }

    pub fn layer_norm(&mut self, d: usize) -> LayerNormParams {
        LayerNormParams {
            scale: self.vector(d, 1.0, 0.2),
            shift: self.vector(d, 0.0, 0.2),
        }
    }

    pub fn mlp(&mut self, d_model: usize, hidden: usize) -> MlpParams {
        MlpParams {
            w1: self.fan_in(d_model, hidden),
            b1: self.vector(hidden, 0.0, 0.1),
            w2: self.fan_in(hidden, d_model),
            b2: self.vector(d_model, 0.0, 0.1),
        }
    }

    pub fn block(&mut self, cfg: &MultiHeadConfig, variant: Variant, hidden: usize, gamma: f64) -> BlockParams {
        BlockParams {
            attention: self.attention(cfg, variant, gamma, DEFAULT_EPSILON),
            ln1: self.layer_norm(cfg.d_model),
            ln2: self.layer_norm(cfg.d_model),
            mlp: self.mlp(cfg.d_model, hidden),
        }
    }
}

impl BlockParams {
    /// Zero attention and MLP weights with identity layer norms; the block
    /// then computes the identity map.
    pub fn zeros(cfg: &MultiHeadConfig, variant: Variant, hidden: usize) -> Self {
        let (d, h) = (cfg.d_model, cfg.d_h);
        let heads = match variant {
            Variant::Linear => Heads::Linear(
                (0..cfg.n_heads)
                    .map(|_| LinfsaHeadParams {
                        w_q: Matrix::zeros(d, h),
                        w_v: Matrix::zeros(d, h),
                        gamma: DEFAULT_GAMMA,
                        epsilon: DEFAULT_EPSILON,
                    })
                    .collect(),
            ),
            Variant::Pure => Heads::Pure(
                (0..cfg.n_heads)
                    .map(|_| PureHeadParams {
                        w_q: Matrix::zeros(d, h),
                        w_k: Matrix::zeros(d, h),
                        w_v: Matrix::zeros(d, h),
                        epsilon: DEFAULT_EPSILON,
                        activation: Activation::Relu,
                    })
                    .collect(),
            ),
        };
        let ln = || LayerNormParams {
            scale: Vector::filled(d, 1.0),
            shift: Vector::zeros(d),
        };
        BlockParams {
            attention: AttentionParams {
                heads,
                w_o: Matrix::zeros(d, d),
                b_o: Vector::zeros(d),
            },
            ln1: ln(),
            ln2: ln(),
            mlp: MlpParams {
                w1: Matrix::zeros(d, hidden),
                b1: Vector::zeros(hidden),
                w2: Matrix::zeros(hidden, d),
                b2: Vector::zeros(d),
            },
        }
    }

    pub fn variant(&self) -> Variant {
        self.attention.heads.variant()
    }

    /// Checks every tensor shape against `cfg`.
    pub fn validate(&self, cfg: &MultiHeadConfig) -> Result<()> {
        self.attention.validate(cfg)?;
        let d = cfg.d_model;
        for ln in [&self.ln1, &self.ln2] {
            if ln.scale.len() != d || ln.shift.len() != d {
                return Err(Error::shape("BlockParams", "layer norm width differs from d_model"));
            }
        }
        let m = &self.mlp;
        let hidden = m.w1.cols();
        if m.w1.rows() != d || m.b1.len() != hidden || m.w2.shape() != (hidden, d) || m.b2.len() != d {
            return Err(Error::shape("BlockParams", "MLP shapes inconsistent with d_model"));
        }
        Ok(())
    }
}

impl AttentionParams {
    pub fn validate(&self, cfg: &MultiHeadConfig) -> Result<()> {
        if self.heads.len() != cfg.n_heads {
            return Err(Error::Config(format!(
                "{} heads supplied for a {}-head configuration",
                self.heads.len(),
                cfg.n_heads
            )));
        }
        let (d, h) = (cfg.d_model, cfg.d_h);
        let ok = match &self.heads {
            Heads::Linear(hs) => hs
                .iter()
                .all(|p| p.w_q.shape() == (d, h) && p.w_v.shape() == (d, h)),
            Heads::Pure(hs) => hs
                .iter()
                .all(|p| p.w_q.shape() == (d, h) && p.w_k.shape() == (d, h) && p.w_v.shape() == (d, h)),
        };
        if !ok {
            return Err(Error::shape("AttentionParams", format!("head projections must be {d}x{h}")));
        }
        if self.w_o.shape() != (d, d) || self.b_o.len() != d {
            return Err(Error::shape("AttentionParams", format!("output projection must be {d}x{d}")));
        }
        Ok(())
    }
}
