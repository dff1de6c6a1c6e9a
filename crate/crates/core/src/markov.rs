//! Absorbing-Markov-chain reading of the Neumann kernel.
//!
//! Tokens are transient states with transition block `M = γÂ`; each step is
//! absorbed with probability `Rᵢ = 1 − Σⱼ Mᵢⱼ`. The fundamental matrix
//! `N = (I − M)⁻¹` counts expected visits before absorption, and `N − I` is
//! exactly the kernel of [`crate::path::closed_form_kernel`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::AffinityMatrix;
use crate::path::check_series_converges;
use crate::tensor::{solve_linear, Matrix, Vector};

/// Per-walk step limit in [`simulate_walks`].
pub const WALK_STEP_CAP: u64 = 1_000_000;

/// Tolerance on `Σⱼ Mᵢⱼ + Rᵢ = 1`.
pub const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct AbsorbingChain {
    m: Matrix,
    r: Vector,
    gamma: f64,
}

impl AbsorbingChain {
    /// Builds a chain from an explicit transition block; absorption
    /// probabilities are the row deficits.
    pub fn from_transitions(m: Matrix, gamma: f64) -> Result<Self> {
        if !m.is_square() || m.rows() == 0 {
            return Err(Error::shape("AbsorbingChain", format!("{:?} is not square", m.shape())));
        }
        if m.min_entry() < 0.0 {
            return Err(Error::InvalidArgument("transition probabilities must be nonnegative".into()));
        }
        let sums = m.row_sums();
        let mut r = Vec::with_capacity(m.rows());
        for (row, &s) in sums.iter().enumerate() {
            let deficit = 1.0 - s;
            if deficit < -ROW_SUM_TOL {
                let row_sum = if gamma > 0.0 { s / gamma } else { s };
                return Err(Error::InvalidChain { row, row_sum, scaled: s });
            }
            r.push(deficit.max(0.0));
        }
        Ok(Self {
            m,
            r: Vector::from_vec(r),
            gamma,
        })
    }

    /// Substochastic transition block `M`.
    pub fn transitions(&self) -> &Matrix {
        &self.m
    }

    /// Per-step absorption probabilities `R`.
    pub fn absorption(&self) -> &Vector {
        &self.r
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn n_states(&self) -> usize {
        self.m.rows()
    }

    /// Canonical `(N+1) × (N+1)` form `[[M, R], [0ᵀ, 1]]`.
    pub fn canonical(&self) -> Matrix {
        let n = self.n_states();
        Matrix::from_fn(n + 1, n + 1, |i, j| match (i < n, j < n) {
            (true, true) => self.m[(i, j)],
            (true, false) => self.r[i],
            (false, true) => 0.0,
            (false, false) => 1.0,
        })
    }
}

/// `M = γÂ`, `Rᵢ = 1 − γ Σⱼ Âᵢⱼ`.
pub fn build_absorbing_chain(a_hat: &AffinityMatrix, gamma: f64) -> Result<AbsorbingChain> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidArgument(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    let a = a_hat.matrix();
    let sums = a.row_sums();
    for (row, &row_sum) in sums.iter().enumerate() {
        let scaled = gamma * row_sum;
        if scaled > 1.0 + ROW_SUM_TOL {
            return Err(Error::InvalidChain { row, row_sum, scaled });
        }
    }
    AbsorbingChain::from_transitions(a.scale(gamma), gamma)
}

/// Expected visit counts `N = (I − M)⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct FundamentalMatrix {
    n: Matrix,
}

impl FundamentalMatrix {
    pub fn matrix(&self) -> &Matrix {
        &self.n
    }

    /// `N − I`: expected visits excluding the starting state.
    pub fn excluding_start(&self) -> Matrix {
        let mut s = self.n.clone();
        for d in 0..s.rows() {
            s[(d, d)] -= 1.0;
        }
        s
    }
}

pub fn fundamental_matrix(chain: &AbsorbingChain) -> Result<FundamentalMatrix> {
    let m = chain.transitions();
    check_series_converges(m, 1.0)?;
    let n = m.rows();
    let system = Matrix::identity(n).sub(m)?;
    match solve_linear(&system, &Matrix::identity(n)) {
        Ok(n) => Ok(FundamentalMatrix { n }),
        Err(Error::Singular { .. }) => Err(Error::DivergentSeries {
            gamma: chain.gamma(),
            rho: 1.0,
            product: 1.0,
        }),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WalkCentralities {
    /// Row sums of `N`: expected visits starting from each token.
    pub c_out: Vector,
    /// Column sums of `N`: expected visits received by each token.
    pub c_in: Vector,
}

pub fn walk_centralities(n: &FundamentalMatrix) -> WalkCentralities {
    WalkCentralities {
        c_out: n.matrix().row_sums(),
        c_in: n.matrix().col_sums(),
    }
}

/// Monte-Carlo visit counts from one start state.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitEstimate {
    /// Mean visits per token (the start counts once at step 0).
    pub mean: Vector,
    /// Sample standard deviation of the per-walk visit counts.
    pub sample_std: Vector,
    pub num_walks: u64,
}

impl VisitEstimate {
    /// Standard error of each mean, `sample_std / √num_walks`.
    pub fn standard_error(&self) -> Vector {
        self.sample_std.scale(1.0 / (self.num_walks as f64).sqrt())
    }
}

#[derive(Clone)]
struct VisitTotals {
    sum: Vec<u64>,
    sum_sq: Vec<u128>,
    scratch: Vec<u64>,
}

impl VisitTotals {
    fn new(n: usize) -> Self {
        Self {
            sum: vec![0; n],
            sum_sq: vec![0; n],
            scratch: vec![0; n],
        }
    }

    fn merge(mut self, other: Self) -> Self {
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sum_sq.iter_mut().zip(&other.sum_sq) {
            *a += b;
        }
        self
    }
}

/// Simulates `num_walks` absorbing random walks from `start`.
///
/// Walk `k` draws from its own ChaCha8 stream keyed by `(seed, k)`, and
/// visits are accumulated as integers, so the estimate is bit-identical for
/// any thread count.
pub fn simulate_walks(chain: &AbsorbingChain, start: usize, num_walks: u64, seed: u64) -> Result<VisitEstimate> {
    let n = chain.n_states();
    if start >= n {
        return Err(Error::InvalidArgument(format!("start state {start} out of range for {n} states")));
    }
    if num_walks == 0 {
        return Err(Error::InvalidArgument("num_walks must be at least 1".into()));
    }
    let cumulative: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            chain
                .transitions()
                .row(i)
                .iter()
                .scan(0.0, |acc, &p| {
                    *acc += p;
                    Some(*acc)
                })
                .collect()
        })
        .collect();

    let totals = (0..num_walks)
        .into_par_iter()
        .try_fold(
            || VisitTotals::new(n),
            |mut acc, walk| {
                acc.scratch.iter_mut().for_each(|c| *c = 0);
                run_walk(&cumulative, start, seed, walk, &mut acc.scratch)?;
                for j in 0..n {
                    let c = acc.scratch[j];
                    acc.sum[j] += c;
                    acc.sum_sq[j] += (c as u128) * (c as u128);
                }
                Ok::<_, Error>(acc)
            },
        )
        .try_reduce(|| VisitTotals::new(n), |a, b| Ok(a.merge(b)))?;

    let walks = num_walks as f64;
    let mut mean = Vec::with_capacity(n);
    let mut std = Vec::with_capacity(n);
    for j in 0..n {
        let m = totals.sum[j] as f64 / walks;
        mean.push(m);
        let var = if num_walks > 1 {
            // Σ(c − m)² = Σc² − (Σc)²/K, evaluated in exact integer arithmetic.
            let s = totals.sum[j] as u128;
            let k = num_walks as u128;
            let centered = totals.sum_sq[j] * k - s * s;
            centered as f64 / (walks * (walks - 1.0))
        } else {
            0.0
        };
        std.push(var.max(0.0).sqrt());
    }
    Ok(VisitEstimate {
        mean: Vector::from_vec(mean),
        sample_std: Vector::from_vec(std),
        num_walks,
    })
}

fn run_walk(cumulative: &[Vec<f64>], start: usize, seed: u64, walk: u64, visits: &mut [u64]) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(walk);
    let mut state = start;
    visits[state] += 1;
    for _ in 0..WALK_STEP_CAP {
        let u: f64 = rng.gen();
        // Inverse CDF over N transitions followed by absorption.
        match cumulative[state].iter().position(|&c| u < c) {
            Some(next) => {
                state = next;
                visits[state] += 1;
            }
            None => return Ok(()),
        }
    }
    Err(Error::WalkCap { walk, cap: WALK_STEP_CAP })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    /// Argsort of Â's column sums (one-hop incoming attention).
    pub one_hop: Vec<usize>,
    /// Argsort of `c_in` (multi-hop Katz centrality).
    pub katz: Vec<usize>,
    pub one_hop_scores: Vector,
    pub c_in: Vector,
}

/// Compares one-hop incoming attention with multi-hop incoming centrality.
/// Both orderings are descending with ties broken by lower index.
pub fn one_hop_vs_multihop_ranking(a_hat: &AffinityMatrix, gamma: f64) -> Result<Ranking> {
    let chain = build_absorbing_chain(a_hat, gamma)?;
    let n = fundamental_matrix(&chain)?;
    let one_hop_scores = a_hat.matrix().col_sums();
    let c_in = walk_centralities(&n).c_in;
    Ok(Ranking {
        one_hop: argsort_descending(&one_hop_scores),
        katz: argsort_descending(&c_in),
        one_hop_scores,
        c_in,
    })
}

pub fn argsort_descending(scores: &Vector) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Raw edge weights of the five-token one-hop/multi-hop fixture: tokens 1 and
/// 2 both point at token 0, which feeds the chain 0 → 3 → 4, over a weak
/// uniform background.
pub const FIG3_WEIGHTS: FixtureWeights = FixtureWeights {
    into_zero: 1.0,
    zero_to_three: 1.0,
    three_to_four: 1.5,
    background: 0.05,
};

/// Decay used with [`FIG3_WEIGHTS`].
pub const FIG3_GAMMA: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixtureWeights {
    pub into_zero: f64,
    pub zero_to_three: f64,
    pub three_to_four: f64,
    pub background: f64,
}

impl FixtureWeights {
    pub fn raw(&self) -> Matrix {
        let mut w = Matrix::from_fn(5, 5, |i, j| if i == j { 0.0 } else { self.background });
        w[(1, 0)] = self.into_zero;
        w[(2, 0)] = self.into_zero;
        w[(0, 3)] = self.zero_to_three;
        w[(3, 4)] = self.three_to_four;
        w
    }

    pub fn affinity(&self, epsilon: f64) -> Result<AffinityMatrix> {
        AffinityMatrix::from_weights(&self.raw(), epsilon)
    }
}

/// The frozen fixture: one-hop ranks token 0 first, the chain ranks token 4 first.
pub fn fig3_fixture(epsilon: f64) -> Result<(AffinityMatrix, f64)> {
    Ok((FIG3_WEIGHTS.affinity(epsilon)?, FIG3_GAMMA))
}
