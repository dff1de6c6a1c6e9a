//! Path integrals on the attention graph.
//!
//! Length-`t` walk sums are entries of `Aᵗ`; discounting by `γᵗ` and summing
//! over all lengths gives the Neumann kernel `Č = (I − γA)⁻¹ − I`, whose row
//! sums are the token centralities.

use crate::error::{Error, Result};
use crate::graph::spectral_radius_estimate;
use crate::tensor::{matmul, solve_linear, Matrix, Vector};

/// Largest graph accepted by [`path_sum_bruteforce`].
pub const BRUTEFORCE_MAX_NODES: usize = 8;
/// Longest walk accepted by [`path_sum_bruteforce`].
pub const BRUTEFORCE_MAX_LENGTH: usize = 5;

/// Margin below 1 that `γ·ρ̂` must respect before a closed form is attempted.
pub const CONTRACTIVITY_MARGIN: f64 = 1e-9;

/// Geometric path discount `γ ∈ (0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct DecayFactor(f64);

impl DecayFactor {
    pub const DEFAULT: DecayFactor = DecayFactor(0.7);

    pub fn new(gamma: f64) -> Result<Self> {
        if gamma > 0.0 && gamma < 1.0 {
            Ok(Self(gamma))
        } else {
            Err(Error::InvalidArgument(format!(
                "decay factor must lie in (0, 1), got {gamma}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for DecayFactor {
    fn default() -> Self {
        Self::DEFAULT
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentralityReport {
    /// `Č = (I − γA)⁻¹ − I`.
    pub kernel: Matrix,
    /// Row sums of the kernel.
    pub scores: Vector,
    /// `c_t = Aᵗ 𝟏` for `t = 1..=T`, when requested.
    pub per_depth: Option<Vec<Vector>>,
}

fn require_square(op: &'static str, a: &Matrix) -> Result<()> {
    if a.is_square() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{}x{} is not square", a.rows(), a.cols())))
    }
}

/// Sums the weights of every length-`t` walk from `i` to `j` by explicit
/// enumeration of the `Nᵗ⁻¹` intermediate-node sequences.
pub fn path_sum_bruteforce(a: &Matrix, i: usize, j: usize, t: usize) -> Result<f64> {
    require_square("path_sum_bruteforce", a)?;
    let n = a.rows();
    if i >= n || j >= n {
        return Err(Error::InvalidArgument(format!("endpoints ({i}, {j}) out of range for {n} nodes")));
    }
    if t == 0 {
        return Err(Error::InvalidArgument("walk length must be at least 1".into()));
    }
    if n > BRUTEFORCE_MAX_NODES || t > BRUTEFORCE_MAX_LENGTH {
        return Err(Error::Capacity(format!(
            "{n} nodes, length {t} (limits: {BRUTEFORCE_MAX_NODES} nodes, length {BRUTEFORCE_MAX_LENGTH})"
        )));
    }

    // Odometer over intermediate nodes v_1..v_{t-1}.
    let mut inner = vec![0usize; t - 1];
    let mut total = 0.0;
    loop {
        let mut weight = 1.0;
        let mut prev = i;
        for &node in &inner {
            weight *= a[(prev, node)];
            prev = node;
        }
        weight *= a[(prev, j)];
        total += weight;

        let mut pos = 0;
        loop {
            if pos == inner.len() {
                return Ok(total);
            }
            inner[pos] += 1;
            if inner[pos] < n {
                break;
            }
            inner[pos] = 0;
            pos += 1;
        }
    }
}

/// `Aᵗ` by repeated multiplication, `t ≥ 1`.
pub fn matrix_power(a: &Matrix, t: usize) -> Result<Matrix> {
    require_square("matrix_power", a)?;
    if t == 0 {
        return Ok(Matrix::identity(a.rows()));
    }
    let mut p = a.clone();
    for _ in 1..t {
        p = matmul(&p, a)?;
    }
    Ok(p)
}

/// `c_t(i) = Σⱼ Aᵗ(i, j)`.
pub fn depth_score(a: &Matrix, t: usize) -> Result<Vector> {
    require_square("depth_score", a)?;
    if t == 0 {
        return Err(Error::InvalidArgument("depth must be at least 1".into()));
    }
    // Aᵗ 𝟏 by repeated matrix-vector products.
    let mut v = Vector::filled(a.rows(), 1.0);
    for _ in 0..t {
        v = a.matvec(&v)?;
    }
    Ok(v)
}

/// Partial sum `Σ_{t=1}^{depth} (γA)ᵗ` via Horner accumulation `P ← γA(P + I)`.
pub fn truncated_neumann(a: &Matrix, gamma: DecayFactor, depth: usize) -> Result<Matrix> {
    require_square("truncated_neumann", a)?;
    if depth == 0 {
        return Err(Error::InvalidArgument("depth must be at least 1".into()));
    }
    let n = a.rows();
    let step = a.scale(gamma.value());
    let mut p = Matrix::zeros(n, n);
    for _ in 0..depth {
        for d in 0..n {
            p[(d, d)] += 1.0;
        }
        p = matmul(&step, &p)?;
    }
    Ok(p)
}

/// Closed-form kernel `Č = (I − γA)⁻¹ − I`.
///
/// Refuses to run unless `γ·ρ̂(A) < 1 − 1e-9`, with `ρ̂` from power iteration.
pub fn closed_form_kernel(a: &Matrix, gamma: DecayFactor) -> Result<Matrix> {
    require_square("closed_form_kernel", a)?;
    check_series_converges(a, gamma.value())?;
    resolvent_minus_identity(a, gamma.value())
}

pub(crate) fn check_series_converges(a: &Matrix, gamma: f64) -> Result<f64> {
    let rho = spectral_radius_estimate(a)?;
    let product = gamma * rho;
    if product >= 1.0 - CONTRACTIVITY_MARGIN {
        return Err(Error::DivergentSeries { gamma, rho, product });
    }
    Ok(rho)
}

/// `(I − γA)⁻¹ − I` without the contractivity check.
fn resolvent_minus_identity(a: &Matrix, gamma: f64) -> Result<Matrix> {
    let n = a.rows();
    let system = Matrix::identity(n).sub(&a.scale(gamma))?;
    let mut kernel = solve_linear(&system, &Matrix::identity(n))?;
    for d in 0..n {
        kernel[(d, d)] -= 1.0;
    }
    Ok(kernel)
}

/// Row sums of the kernel: `č = Č 𝟏`.
pub fn token_centrality(kernel: &Matrix) -> Result<Vector> {
    require_square("token_centrality", kernel)?;
    Ok(kernel.row_sums())
}

/// `S_L = Σ_{l=1}^{L} γˡ Z⁽ˡ⁾`.
pub fn layerwise_accumulate(layer_outputs: &[Matrix], gamma: DecayFactor) -> Result<Matrix> {
    let first = layer_outputs.first().ok_or(Error::Arity { expected: 1, got: 0 })?;
    let mut acc = Matrix::zeros(first.rows(), first.cols());
    let mut weight = 1.0;
    for z in layer_outputs {
        weight *= gamma.value();
        acc.axpy(weight, z)?;
    }
    Ok(acc)
}

/// Kernel, centralities and, if `per_depth` is `Some(T)`, the depth scores
/// `c_1..c_T`.
pub fn centrality_report(a: &Matrix, gamma: DecayFactor, per_depth: Option<usize>) -> Result<CentralityReport> {
    let kernel = closed_form_kernel(a, gamma)?;
    let scores = token_centrality(&kernel)?;
    let per_depth = match per_depth {
        None => None,
        Some(depth) => {
            let mut out = Vec::with_capacity(depth);
            let mut v = Vector::filled(a.rows(), 1.0);
            for _ in 0..depth {
                v = a.matvec(&v)?;
                out.push(v.clone());
            }
            Some(out)
        }
    };
    Ok(CentralityReport {
        kernel,
        scores,
        per_depth,
    })
}
