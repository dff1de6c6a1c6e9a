//! Content-adaptive token graphs.
//!
//! The affinity operator is `Â = φ(QKᵀ) / (‖φ(QKᵀ)‖_F + ε)` with φ = ReLU by
//! default. No `1/√d` temperature is applied: any positive pre-scale cancels
//! under the Frobenius normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{frobenius_norm, matmul, matmul_transpose_b, power_iteration_default, Matrix};

/// Default normalization floor ε.
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Pointwise gate applied to raw query–key scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    /// Tanh approximation of GELU. Not sign-preserving, so the resulting
    /// operator can have small negative entries.
    Gelu,
    Abs,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_K: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => gelu(x),
            Activation::Abs => x.abs(),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => gelu_derivative(x),
            Activation::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Per-token feature rows (queries, keys or values), shape `N × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFeatures {
    mat: Matrix,
}

impl TokenFeatures {
    pub fn new(mat: Matrix) -> Self {
        Self { mat }
    }

    pub fn n_tokens(&self) -> usize {
        self.mat.rows()
    }

    pub fn dim(&self) -> usize {
        self.mat.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.mat
    }

    pub fn into_matrix(self) -> Matrix {
        self.mat
    }
}

impl From<Matrix> for TokenFeatures {
    fn from(mat: Matrix) -> Self {
        Self::new(mat)
    }
}

/// A nonnegative `N × N` operator with Frobenius norm at most 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    mat: Matrix,
    epsilon: f64,
}

impl AffinityMatrix {
    /// Gates raw weights with ReLU and Frobenius-normalizes them.
    pub fn from_weights(weights: &Matrix, epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        if !weights.is_square() || weights.rows() == 0 {
            return Err(Error::shape(
                "AffinityMatrix::from_weights",
                format!("{:?} is not a non-empty square matrix", weights.shape()),
            ));
        }
        Ok(Self::normalize(weights.map(|x| x.max(0.0)), epsilon))
    }

    /// Wraps an already-normalized operator after checking nonnegativity and
    /// `‖mat‖_F ≤ 1`.
    pub fn from_normalized(mat: Matrix, epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        if !mat.is_square() || mat.rows() == 0 {
            return Err(Error::shape(
                "AffinityMatrix::from_normalized",
                format!("{:?} is not a non-empty square matrix", mat.shape()),
            ));
        }
        if mat.min_entry() < 0.0 {
            return Err(Error::InvalidArgument("affinity entries must be nonnegative".into()));
        }
        let norm = frobenius_norm(&mat);
        if norm > 1.0 + 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "affinity Frobenius norm {norm} exceeds 1"
            )));
        }
        Ok(Self { mat, epsilon })
    }

    fn normalize(gated: Matrix, epsilon: f64) -> Self {
        let norm = frobenius_norm(&gated);
        let mat = gated.scale(1.0 / (norm + epsilon));
        Self { mat, epsilon }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.mat
    }

    pub fn into_matrix(self) -> Matrix {
        self.mat
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn n_tokens(&self) -> usize {
        self.mat.rows()
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")))
    }
}

/// `Â = [QKᵀ]₊ / (‖[QKᵀ]₊‖_F + ε)`.
pub fn build_affinity(q: &TokenFeatures, k: &TokenFeatures, epsilon: f64) -> Result<AffinityMatrix> {
    build_affinity_with(q, k, epsilon, Activation::Relu)
}

/// [`build_affinity`] with a selectable gate.
pub fn build_affinity_with(
    q: &TokenFeatures,
    k: &TokenFeatures,
    epsilon: f64,
    activation: Activation,
) -> Result<AffinityMatrix> {
    check_epsilon(epsilon)?;
    if q.dim() != k.dim() || q.n_tokens() != k.n_tokens() {
        return Err(Error::shape(
            "build_affinity",
            format!("queries {:?} vs keys {:?}", q.matrix().shape(), k.matrix().shape()),
        ));
    }
    if q.n_tokens() == 0 {
        return Err(Error::shape("build_affinity", "no tokens"));
    }
    let raw = matmul_transpose_b(q.matrix(), k.matrix())?;
    Ok(AffinityMatrix::normalize(raw.map(|x| activation.apply(x)), epsilon))
}

/// One diffusion step `Y = Â V`.
pub fn diffuse(a_hat: &AffinityMatrix, v: &TokenFeatures) -> Result<TokenFeatures> {
    if v.n_tokens() != a_hat.n_tokens() {
        return Err(Error::shape(
            "diffuse",
            format!("{} tokens in values for a {}-token graph", v.n_tokens(), a_hat.n_tokens()),
        ));
    }
    Ok(TokenFeatures::new(matmul(a_hat.matrix(), v.matrix())?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contractivity {
    /// `gamma * rho_estimate < 1`.
    pub ok: bool,
    /// Dominant eigenvalue from ℓ1 power iteration; 0 for nilpotent operators.
    pub rho_estimate: f64,
}

/// Checks whether the discounted series `Σ (γA)ᵗ` converges for `a`.
pub fn assert_contractive(a: &Matrix, gamma: f64) -> Result<Contractivity> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    let rho_estimate = spectral_radius_estimate(a)?;
    Ok(Contractivity {
        ok: gamma * rho_estimate < 1.0,
        rho_estimate,
    })
}

/// Power-iteration estimate of ρ(a); a vanishing iterate reports 0.
pub(crate) fn spectral_radius_estimate(a: &Matrix) -> Result<f64> {
    if !a.is_square() {
        return Err(Error::shape("spectral radius", format!("{:?} is not square", a.shape())));
    }
    if a.rows() == 0 {
        return Ok(0.0);
    }
    match power_iteration_default(a) {
        Ok(p) => Ok(p.lambda),
        Err(Error::DegenerateOperator(_)) => Ok(0.0),
        Err(e) => Err(e),
    }
}
