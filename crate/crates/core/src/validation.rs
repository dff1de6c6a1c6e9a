//! Finite-difference gradient checks, eigenvector alignment and rank correlation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{build_affinity, TokenFeatures};
use crate::layers::{
    attention_backward, attention_forward, block_backward, layer_norm, layer_norm_backward, linfsa_head_backward,
    linfsa_head_forward, linfsa_weights_backward, linfsa_weights_trace, mlp_backward, mlp_forward,
    multihead_block_forward, pure_head_backward, pure_head_forward, AttentionParams, BlockParams, Init,
    LayerNormParams, LinfsaHeadParams, MlpParams, MultiHeadConfig, Parameters, PureHeadParams, Variant,
    DEFAULT_GAMMA,
};
use crate::tensor::{dot, power_iteration, Matrix, Vector, POWER_TOL};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-6;
const REL_FLOOR: f64 = 1e-8;

/// A scalar function with an analytic gradient.
pub trait Objective {
    fn value(&self, theta: &[f64]) -> Result<f64>;
    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>>;
}

/// Adapter turning a value closure and a gradient closure into an [`Objective`].
pub struct FnObjective<F, G> {
    pub value: F,
    pub gradient: G,
}

impl<F, G> Objective for FnObjective<F, G>
where
    F: Fn(&[f64]) -> Result<f64>,
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    fn value(&self, theta: &[f64]) -> Result<f64> {
        (self.value)(theta)
    }
    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        (self.gradient)(theta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinate attaining `max_rel_error`.
    pub worst_index: usize,
    /// Analytic and central-difference derivatives at `worst_index`.
    pub analytic: f64,
    pub numeric: f64,
}

/// Largest relative error between the analytic gradient and central
/// differences, `|g − fd| / max(|g|, |fd|, 1e-8)`, over all coordinates.
pub fn gradcheck_fd(f: &dyn Objective, theta: &[f64], step: f64) -> Result<GradCheck> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let grad = f.gradient(theta)?;
    if grad.len() != theta.len() {
        return Err(Error::shape("gradcheck_fd", format!("{} gradient entries for {} parameters", grad.len(), theta.len())));
    }
    let eval = |t: &[f64]| -> Result<f64> {
        let v = f.value(t)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Evaluation(format!("objective returned {v}")))
        }
    };
    eval(theta)?;
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: grad.first().copied().unwrap_or(0.0),
        numeric: grad.first().copied().unwrap_or(0.0),
    };
    let mut probe = theta.to_vec();
    for i in 0..theta.len() {
        probe[i] = theta[i] + step;
        let plus = eval(&probe)?;
        probe[i] = theta[i] - step;
        let minus = eval(&probe)?;
        probe[i] = theta[i];
        let fd = (plus - minus) / (2.0 * step);
        let g = grad[i];
        if !g.is_finite() {
            return Err(Error::Evaluation(format!("analytic gradient entry {i} is {g}")));
        }
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(REL_FLOOR);
        if rel > worst.max_rel_error {
            worst = GradCheck {
                max_rel_error: rel,
                worst_index: i,
                analytic: g,
                numeric: fd,
            };
        }
    }
    Ok(worst)
}

/// Differentiable operations covered by [`gradcheck_layer`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerOp {
    LinfsaWeights,
    LinearHead,
    PureHead,
    LayerNorm,
    Mlp,
    LinearAttention,
    PureAttention,
    LinearBlock,
    PureBlock,
}

impl LayerOp {
    pub const ALL: [LayerOp; 9] = [
        LayerOp::LinfsaWeights,
        LayerOp::LinearHead,
        LayerOp::PureHead,
        LayerOp::LayerNorm,
        LayerOp::Mlp,
        LayerOp::LinearAttention,
        LayerOp::PureAttention,
        LayerOp::LinearBlock,
        LayerOp::PureBlock,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerOp::LinfsaWeights => "linfsa_weights",
            LayerOp::LinearHead => "linear_head",
            LayerOp::PureHead => "pure_head",
            LayerOp::LayerNorm => "layer_norm",
            LayerOp::Mlp => "mlp",
            LayerOp::LinearAttention => "linear_attention",
            LayerOp::PureAttention => "pure_attention",
            LayerOp::LinearBlock => "linear_block",
            LayerOp::PureBlock => "pure_block",
        }
    }
}

impl std::fmt::Display for LayerOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

const GC_TOKENS: usize = 7;
const GC_HEADS: usize = 2;
const GC_DH: usize = 2;
const GC_MODEL: usize = GC_HEADS * GC_DH;
const GC_HIDDEN: usize = 8;

/// Objective `⟨R, op(X; θ)⟩` over the flat vector `[X, θ]`, with `R` a fixed
/// random weighting of the output.
struct LayerObjective<P, Fw, Bw> {
    template: P,
    n: usize,
    d_in: usize,
    weights: Matrix,
    forward: Fw,
    backward: Bw,
}

impl<P, Fw, Bw> LayerObjective<P, Fw, Bw>
where
    P: Parameters + Clone,
{
    fn split(&self, theta: &[f64]) -> Result<(Matrix, P)> {
        let nx = self.n * self.d_in;
        let x = Matrix::new(self.n, self.d_in, theta[..nx].to_vec())?;
        let mut p = self.template.clone();
        p.load_flat(&theta[nx..])?;
        Ok((x, p))
    }
}

impl<P, Fw, Bw> Objective for LayerObjective<P, Fw, Bw>
where
    P: Parameters + Clone,
    Fw: Fn(&Matrix, &P) -> Result<Matrix>,
    Bw: Fn(&Matrix, &P, &Matrix) -> Result<(Matrix, P)>,
{
    fn value(&self, theta: &[f64]) -> Result<f64> {
        let (x, p) = self.split(theta)?;
        let out = (self.forward)(&x, &p)?;
        if out.shape() != self.weights.shape() {
            return Err(Error::shape("layer objective", "output shape changed"));
        }
        Ok(dot(out.data(), self.weights.data()))
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let (x, p) = self.split(theta)?;
        let (dx, dp) = (self.backward)(&x, &p, &self.weights)?;
        let mut g = dx.into_data();
        g.extend(dp.flatten());
        Ok(g)
    }
}

fn run_case<P, Fw, Bw>(seed: u64, d_in: usize, template: P, forward: Fw, backward: Bw) -> Result<GradCheck>
where
    P: Parameters + Clone,
    Fw: Fn(&Matrix, &P) -> Result<Matrix>,
    Bw: Fn(&Matrix, &P, &Matrix) -> Result<(Matrix, P)>,
{
    let mut init = Init::new(seed ^ 0x5eed);
    let x = init.matrix(GC_TOKENS, d_in, 1.0);
    let out_shape = forward(&x, &template)?.shape();
    let weights = init.matrix(out_shape.0, out_shape.1, 1.0);
    let obj = LayerObjective {
        template,
        n: GC_TOKENS,
        d_in,
        weights,
        forward,
        backward,
    };
    let mut theta = x.into_data();
    theta.extend(obj.template.flatten());
    gradcheck_fd(&obj, &theta, FD_STEP)
}

/// Gradient check of one layer operation on a small random instance.
pub fn gradcheck_layer(op: LayerOp, seed: u64) -> Result<GradCheck> {
    let cfg = MultiHeadConfig::new(GC_HEADS, GC_DH, GC_MODEL)?;
    let mut init = Init::new(seed);
    let eps = crate::graph::DEFAULT_EPSILON;
    match op {
        LayerOp::LinfsaWeights => run_case(
            seed,
            GC_DH + 1,
            Matrix::zeros(0, 0),
            |q, _| {
                let a = linfsa_weights_trace(q, eps)?.a;
                Ok(Matrix::from_vec(1, a.len(), a.into_vec()))
            },
            |q, _, w| {
                let t = linfsa_weights_trace(q, eps)?;
                Ok((linfsa_weights_backward(q, &t, w.data())?, Matrix::zeros(0, 0)))
            },
        ),
        LayerOp::LinearHead => run_case(
            seed,
            GC_MODEL,
            init.linear_head(GC_MODEL, GC_DH, DEFAULT_GAMMA, eps),
            |x, p: &LinfsaHeadParams| Ok(linfsa_head_forward(&TokenFeatures::new(x.clone()), p)?.broadcast(x.rows())),
            |x, p, w| linfsa_head_backward(&TokenFeatures::new(x.clone()), p, w.col_sums().as_slice()),
        ),
        LayerOp::PureHead => run_case(
            seed,
            GC_MODEL,
            init.pure_head(GC_MODEL, GC_DH, eps),
            |x, p: &PureHeadParams| pure_head_forward(&TokenFeatures::new(x.clone()), p),
            |x, p, w| pure_head_backward(&TokenFeatures::new(x.clone()), p, w),
        ),
        LayerOp::LayerNorm => run_case(
            seed,
            GC_MODEL,
            init.layer_norm(GC_MODEL),
            |x, p: &LayerNormParams| layer_norm(x, p),
            layer_norm_backward,
        ),
        LayerOp::Mlp => run_case(
            seed,
            GC_MODEL,
            init.mlp(GC_MODEL, GC_HIDDEN),
            |x, p: &MlpParams| mlp_forward(x, p),
            mlp_backward,
        ),
        LayerOp::LinearAttention | LayerOp::PureAttention => {
            let variant = if op == LayerOp::LinearAttention {
                Variant::Linear
            } else {
                Variant::Pure
            };
            run_case(
                seed,
                GC_MODEL,
                init.attention(&cfg, variant, DEFAULT_GAMMA, eps),
                |x, p: &AttentionParams| Ok(attention_forward(x, p)?.out),
                attention_backward,
            )
        }
        LayerOp::LinearBlock | LayerOp::PureBlock => {
            let variant = if op == LayerOp::LinearBlock {
                Variant::Linear
            } else {
                Variant::Pure
            };
            run_case(
                seed,
                GC_MODEL,
                init.block(&cfg, variant, GC_HIDDEN, DEFAULT_GAMMA),
                move |x, p: &BlockParams| {
                    Ok(multihead_block_forward(&TokenFeatures::new(x.clone()), &cfg, p, variant)?.into_matrix())
                },
                move |x, p, w| block_backward(&TokenFeatures::new(x.clone()), &cfg, p, w),
            )
        }
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(u: &Vector, v: &Vector) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("spearman", format!("lengths {} and {}", u.len(), v.len())));
    }
    if u.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs at least two observations".into()));
    }
    let (ru, rv) = (average_ranks(u.as_slice()), average_ranks(v.as_slice()));
    pearson(&ru, &rv).ok_or_else(|| Error::UndefinedCorrelation("constant input has no rank variation".into()))
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && x[idx[end]] == x[idx[start]] {
            end += 1;
        }
        let rank = (start + end - 1) as f64 / 2.0 + 1.0;
        for &i in &idx[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        None
    } else {
        Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
    }
}

pub fn cosine(u: &Vector, v: &Vector) -> Result<f64> {
    let d = u.dot(v)?;
    let nn = u.l2_norm() * v.l2_norm();
    if nn == 0.0 {
        return Err(Error::UndefinedCorrelation("cosine of a zero vector".into()));
    }
    Ok((d / nn).clamp(-1.0, 1.0))
}

/// Agreement between the linear weights `a` and the dominant eigenvector of
/// `Â = [QQᵀ]₊ / ‖·‖_F` for one query matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentSample {
    pub cosine: f64,
    /// `None` when either vector has no rank variation.
    pub spearman: Option<f64>,
    pub eigenvector: Vector,
    pub weights: Vector,
}

/// Runs the alignment protocol on one sample. A zero `Â` or a vanishing
/// score vector is reported as [`Error::DegenerateOperator`].
pub fn eigenvector_alignment(q: &TokenFeatures, epsilon: f64, t_pow: usize) -> Result<AlignmentSample> {
    if t_pow == 0 {
        return Err(Error::InvalidArgument("t_pow must be at least 1".into()));
    }
    let a_hat = build_affinity(q, q, epsilon)?;
    if a_hat.matrix().data().iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateOperator("affinity matrix is zero".into()));
    }
    let trace = linfsa_weights_trace(q.matrix(), epsilon)?;
    if trace.degenerate {
        return Err(Error::DegenerateOperator("linear attention scores vanished".into()));
    }
    let eig = power_iteration(a_hat.matrix(), &Vector::uniform(q.n_tokens()), t_pow, POWER_TOL)?.v;
    let cosine = cosine(&eig, &trace.a)?;
    let spearman = match spearman(&eig, &trace.a) {
        Ok(s) => Some(s),
        Err(Error::UndefinedCorrelation(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(AlignmentSample {
        cosine,
        spearman,
        eigenvector: eig,
        weights: trace.a,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    /// Mean cosine over valid samples.
    pub cosine: f64,
    pub min_cosine: f64,
    /// Mean Spearman over samples where it is defined.
    pub spearman: Option<f64>,
    pub n_samples: usize,
    pub n_degenerate: usize,
    pub n_spearman_undefined: usize,
}

/// Alignment over a batch; degenerate samples are counted and excluded.
/// Samples are evaluated in parallel and aggregated in input order.
pub fn alignment_batch(samples: &[TokenFeatures], epsilon: f64, t_pow: usize) -> Result<AlignmentResult> {
    let results: Vec<Result<AlignmentSample>> =
        samples.par_iter().map(|q| eigenvector_alignment(q, epsilon, t_pow)).collect();
    let mut cos = Vec::new();
    let mut sp = Vec::new();
    let mut n_degenerate = 0;
    for r in results {
        match r {
            Ok(s) => {
                cos.push(s.cosine);
                if let Some(v) = s.spearman {
                    sp.push(v);
                }
            }
            Err(Error::DegenerateOperator(_)) => n_degenerate += 1,
            Err(e) => return Err(e),
        }
    }
    if cos.is_empty() {
        return Err(Error::DegenerateOperator(format!("all {} samples were degenerate", samples.len())));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(AlignmentResult {
        cosine: mean(&cos),
        min_cosine: cos.iter().copied().fold(f64::INFINITY, f64::min),
        spearman: (!sp.is_empty()).then(|| mean(&sp)),
        n_samples: cos.len(),
        n_degenerate,
        n_spearman_undefined: cos.len() - sp.len(),
    })
}

/// `count` query matrices with entries uniform in `[0, 1)`.
pub fn random_nonnegative_queries(n: usize, d: usize, count: usize, seed: u64) -> Vec<TokenFeatures> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| TokenFeatures::new(Matrix::from_fn(n, d, |_, _| rng.gen_range(0.0..1.0))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, proptest};

    fn v(x: &[f64]) -> Vector {
        Vector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn square_at_three() {
        let f = FnObjective {
            value: |t: &[f64]| Ok(t[0] * t[0]),
            gradient: |t: &[f64]| Ok(vec![2.0 * t[0]]),
        };
        assert!(gradcheck_fd(&f, &[3.0], FD_STEP).unwrap().max_rel_error <= 1e-9);
    }

    #[test]
    fn linear_objective_is_exact() {
        let f = FnObjective {
            value: |t: &[f64]| Ok(2.0 * t[0] - 0.5 * t[1] + 1.0),
            gradient: |_: &[f64]| Ok(vec![2.0, -0.5]),
        };
        assert!(gradcheck_fd(&f, &[0.3, -1.2], FD_STEP).unwrap().max_rel_error <= 1e-9);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let f = FnObjective {
            value: |t: &[f64]| Ok(t[0].sin() + t[1]),
            gradient: |t: &[f64]| Ok(vec![t[0].cos(), 1.1]),
        };
        let r = gradcheck_fd(&f, &[0.4, 0.0], FD_STEP).unwrap();
        assert_eq!(r.worst_index, 1);
        assert!(r.max_rel_error > 0.05);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let f = FnObjective {
            value: |t: &[f64]| Ok(1.0 / t[0]),
            gradient: |t: &[f64]| Ok(vec![-1.0 / (t[0] * t[0])]),
        };
        assert!(matches!(gradcheck_fd(&f, &[0.0], FD_STEP), Err(Error::Evaluation(_))));
        assert!(gradcheck_fd(&f, &[1.0], 0.0).is_err());
    }

    #[test]
    fn summed_linear_head_output() {
        let mut init = Init::new(0);
        let head = init.linear_head(4, 2, DEFAULT_GAMMA, 1e-6);
        let x0 = init.matrix(5, 4, 1.0);
        let unpack = |theta: &[f64]| TokenFeatures::new(Matrix::new(5, 4, theta.to_vec()).unwrap());
        let f = FnObjective {
            value: |t: &[f64]| Ok(linfsa_head_forward(&unpack(t), &head)?.broadcast(5).data().iter().sum()),
            gradient: |t: &[f64]| Ok(linfsa_head_backward(&unpack(t), &head, &[5.0, 5.0])?.0.into_data()),
        };
        let r = gradcheck_fd(&f, x0.data(), FD_STEP).unwrap();
        assert!(r.max_rel_error <= 1e-5, "{r:?}");
    }

    #[test]
    fn every_layer_passes() {
        for op in LayerOp::ALL {
            for seed in 0..3 {
                let r = gradcheck_layer(op, seed).unwrap();
                assert!(r.max_rel_error <= 1e-5, "{op} seed {seed}: {r:?}");
            }
        }
    }

    #[test]
    fn spearman_examples() {
        let a = v(&[1.0, 2.0, 3.0, 4.0]);
        assert!((spearman(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&a, &v(&[4.0, 3.0, 2.0, 1.0])).unwrap() + 1.0).abs() < 1e-15);
        assert!((spearman(&a, &v(&[1.0, 3.0, 2.0, 4.0])).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(spearman(&a, &v(&[1.0; 4])), Err(Error::UndefinedCorrelation(_))));
        assert!(spearman(&a, &v(&[1.0, 2.0])).is_err());
        assert!(spearman(&v(&[1.0]), &v(&[1.0])).is_err());
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn rank_one_alignment() {
        let q = TokenFeatures::new(Matrix::from_rows(&[&[0.2, 0.7, 0.1][..]; 5]).unwrap());
        let s = eigenvector_alignment(&q, 1e-6, 200).unwrap();
        assert!((s.cosine - 1.0).abs() <= 1e-9);
        assert!(s.spearman.is_none());
    }

    #[test]
    fn identity_queries_align() {
        let s = eigenvector_alignment(&TokenFeatures::new(Matrix::identity(4)), 1e-6, 200).unwrap();
        assert!((s.cosine - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn degenerate_samples_are_excluded() {
        let zero = TokenFeatures::new(Matrix::zeros(3, 2));
        assert!(matches!(eigenvector_alignment(&zero, 1e-6, 10), Err(Error::DegenerateOperator(_))));
        let mut batch = random_nonnegative_queries(16, 12, 4, 3);
        batch.push(zero);
        let r = alignment_batch(&batch, 1e-6, 200).unwrap();
        assert_eq!((r.n_samples, r.n_degenerate), (4, 1));
        assert!(r.cosine >= r.min_cosine && r.min_cosine > 0.99);
    }

    proptest! {
        #[test]
        fn spearman_monotone_invariance(xs in prop::collection::vec(-10.0f64..10.0, 3..20), seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ys: Vec<f64> = xs.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (u, w) = (v(&xs), v(&ys));
            let base = spearman(&u, &w);
            let t = v(&xs.iter().map(|x| x.exp()).collect::<Vec<_>>());
            match base {
                Ok(s) => prop_assert!((spearman(&t, &w).unwrap() - s).abs() < 1e-12),
                Err(_) => prop_assert!(spearman(&t, &w).is_err()),
            }
        }
    }
}
