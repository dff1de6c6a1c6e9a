//! Latency scaling study: median wall time per token count and a log–log
//! slope fit over the larger sizes.

use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::DEFAULT_EPSILON;
use crate::layers::{linfsa_weights_trace, pure_head_streamed, DEFAULT_GAMMA};
use crate::tensor::{dot, matmul, Matrix};

pub const BENCH_D_MODEL: usize = 64;
pub const BENCH_D_HEAD: usize = 12;
pub const WARMUP_RUNS: usize = 2;
pub const MIN_REPEATS: usize = 5;
pub const MIN_SIZES: usize = 4;
pub const CSV_HEADER: &str = "variant,n_tokens,median_s,repeats";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BenchVariant {
    #[serde(rename = "pure")]
    Pure,
    #[serde(rename = "linear")]
    Linear,
    #[serde(rename = "softmax-baseline")]
    SoftmaxBaseline,
}

impl BenchVariant {
    pub fn name(self) -> &'static str {
        match self {
            BenchVariant::Pure => "pure",
            BenchVariant::Linear => "linear",
            BenchVariant::SoftmaxBaseline => "softmax-baseline",
        }
    }
}

impl std::fmt::Display for BenchVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for BenchVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pure" => Ok(BenchVariant::Pure),
            "linear" => Ok(BenchVariant::Linear),
            "softmax-baseline" | "softmax" => Ok(BenchVariant::SoftmaxBaseline),
            other => Err(Error::InvalidArgument(format!("unknown bench variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    pub variant: BenchVariant,
    pub n_tokens: usize,
    /// Median seconds over `repeats` timed runs; `None` if the inputs could
    /// not be allocated.
    pub median_s: Option<f64>,
    pub repeats: usize,
}

impl BenchRecord {
    pub fn is_oom(&self) -> bool {
        self.median_s.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
    pub slope: f64,
}

/// Checks the benchmark preconditions: at least four strictly increasing
/// positive sizes and at least five repeats.
pub fn validate_plan(sizes: &[usize], repeats: usize) -> Result<()> {
    if sizes.len() < MIN_SIZES {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_SIZES} sizes, got {}",
            sizes.len()
        )));
    }
    if sizes[0] == 0 || sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("sizes must be positive and strictly increasing".into()));
    }
    if repeats < MIN_REPEATS {
        return Err(Error::InvalidArgument(format!("need at least {MIN_REPEATS} repeats, got {repeats}")));
    }
    Ok(())
}

struct Inputs {
    x: Matrix,
    w_q: Matrix,
    w_k: Matrix,
    w_v: Matrix,
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

/// Reserves the working set up front so an impossible size is reported
/// instead of aborting the process.
fn can_allocate(n: usize) -> bool {
    let floats = n
        .checked_mul(BENCH_D_MODEL + 5 * BENCH_D_HEAD)
        .and_then(|f| f.checked_add(n));
    match floats {
        Some(f) => Vec::<f64>::new().try_reserve_exact(f).is_ok(),
        None => false,
    }
}

fn make_inputs(n: usize, seed: u64) -> Inputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ n as u64);
    let s = 1.0 / (BENCH_D_MODEL as f64).sqrt();
    Inputs {
        x: random_matrix(&mut rng, n, BENCH_D_MODEL, 1.0),
        w_q: random_matrix(&mut rng, BENCH_D_MODEL, BENCH_D_HEAD, s),
        w_k: random_matrix(&mut rng, BENCH_D_MODEL, BENCH_D_HEAD, s),
        w_v: random_matrix(&mut rng, BENCH_D_MODEL, BENCH_D_HEAD, s),
    }
}

fn run_linear(inp: &Inputs) -> Result<Matrix> {
    let q = matmul(&inp.x, &inp.w_q)?;
    let v = matmul(&inp.x, &inp.w_v)?;
    let trace = linfsa_weights_trace(&q, DEFAULT_EPSILON)?;
    let n = q.rows();
    if !trace.degenerate && (trace.a.sum() - 1.0).abs() > 10.0 * DEFAULT_EPSILON * n as f64 {
        return Err(Error::Evaluation(format!("linear weights sum to {}", trace.a.sum())));
    }
    let h = v.transpose().matvec(&trace.a.scale(DEFAULT_GAMMA))?;
    Ok(Matrix::from_fn(n, h.len(), |_, j| h[j]))
}

fn run_pure(inp: &Inputs) -> Result<Matrix> {
    let q = matmul(&inp.x, &inp.w_q)?;
    let k = matmul(&inp.x, &inp.w_k)?;
    let v = matmul(&inp.x, &inp.w_v)?;
    let out = pure_head_streamed(&q, &k, &v, DEFAULT_EPSILON)?;
    let norm = out.frobenius / (out.frobenius + DEFAULT_EPSILON);
    if out.frobenius > 0.0 && (norm - 1.0).abs() > 1e-3 {
        return Err(Error::Evaluation(format!("normalized operator has norm {norm}")));
    }
    Ok(out.z)
}

/// Row-streamed scaled dot-product softmax attention.
fn run_softmax(inp: &Inputs) -> Result<Matrix> {
    let q = matmul(&inp.x, &inp.w_q)?;
    let k = matmul(&inp.x, &inp.w_k)?;
    let v = matmul(&inp.x, &inp.w_v)?;
    let n = q.rows();
    let scale = 1.0 / (BENCH_D_HEAD as f64).sqrt();
    let mut z = Matrix::zeros(n, v.cols());
    let mut row = vec![0.0; n];
    for i in 0..n {
        let qi = q.row(i);
        let mut max = f64::NEG_INFINITY;
        for (j, r) in row.iter_mut().enumerate() {
            *r = dot(qi, k.row(j)) * scale;
            max = max.max(*r);
        }
        let mut total = 0.0;
        for r in row.iter_mut() {
            *r = (*r - max).exp();
            total += *r;
        }
        let zi = z.row_mut(i);
        for (j, &r) in row.iter().enumerate() {
            let w = r / total;
            for (o, x) in zi.iter_mut().zip(v.row(j)) {
                *o += w * x;
            }
        }
    }
    Ok(z)
}

fn run_variant(variant: BenchVariant, inp: &Inputs) -> Result<Matrix> {
    match variant {
        BenchVariant::Pure => run_pure(inp),
        BenchVariant::Linear => run_linear(inp),
        BenchVariant::SoftmaxBaseline => run_softmax(inp),
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

/// Median wall time of one variant at one size, after the warm-up runs.
pub fn time_variant(variant: BenchVariant, n: usize, repeats: usize, seed: u64) -> Result<BenchRecord> {
    if !can_allocate(n) {
        log::warn!("{variant} at N = {n}: allocation failed, marking OOM");
        return Ok(BenchRecord {
            variant,
            n_tokens: n,
            median_s: None,
            repeats,
        });
    }
    let inp = make_inputs(n, seed);
    for _ in 0..WARMUP_RUNS {
        black_box(run_variant(variant, &inp)?);
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let out = run_variant(variant, black_box(&inp))?;
        let elapsed = start.elapsed().as_secs_f64();
        black_box(out);
        times.push(elapsed.max(f64::MIN_POSITIVE));
    }
    Ok(BenchRecord {
        variant,
        n_tokens: n,
        median_s: Some(median(times)),
        repeats,
    })
}

/// Least-squares slope of `ln t` against `ln N`.
pub fn fit_loglog_slope(points: &[(usize, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Arity {
            expected: 2,
            got: points.len(),
        });
    }
    if points.iter().any(|&(n, t)| n == 0 || !(t > 0.0)) {
        return Err(Error::InvalidArgument("slope fit needs positive sizes and times".into()));
    }
    let xs: Vec<f64> = points.iter().map(|&(n, _)| (n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, t)| t.ln()).collect();
    let k = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("slope fit needs at least two distinct sizes".into()));
    }
    Ok(sxy / sxx)
}

/// Slope over the larger half (rounded up) of the records, skipping OOM sizes.
pub fn upper_half_slope(records: &[BenchRecord]) -> Result<f64> {
    let half = records.len().div_ceil(2);
    let points: Vec<(usize, f64)> = records[records.len() - half..]
        .iter()
        .filter_map(|r| r.median_s.map(|t| (r.n_tokens, t)))
        .collect();
    fit_loglog_slope(&points)
}

pub fn bench_scaling(variant: BenchVariant, sizes: &[usize], repeats: usize, seed: u64) -> Result<BenchReport> {
    validate_plan(sizes, repeats)?;
    let records = sizes
        .iter()
        .map(|&n| time_variant(variant, n, repeats, seed))
        .collect::<Result<Vec<_>>>()?;
    let slope = upper_half_slope(&records)?;
    Ok(BenchReport { records, slope })
}

/// CSV with header `variant,n_tokens,median_s,repeats`; OOM rows print `OOM`.
pub fn to_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let t = r.median_s.map_or_else(|| "OOM".to_string(), |t| format!("{t:.9}"));
        out.push_str(&format!("{},{},{},{}\n", r.variant, r.n_tokens, t, r.repeats));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_validation() {
        assert!(validate_plan(&[1, 2, 3], 5).is_err());
        assert!(validate_plan(&[1, 2, 2, 3], 5).is_err());
        assert!(validate_plan(&[0, 1, 2, 3], 5).is_err());
        assert!(validate_plan(&[1, 2, 3, 4], 4).is_err());
        assert!(validate_plan(&[1, 2, 3, 4], 5).is_ok());
    }

    #[test]
    fn slope_of_exact_power_laws() {
        let pts: Vec<(usize, f64)> = [64, 128, 256, 512].iter().map(|&n| (n, 3e-9 * (n as f64).powi(2))).collect();
        assert!((fit_loglog_slope(&pts).unwrap() - 2.0).abs() < 1e-12);
        let pts: Vec<(usize, f64)> = [64, 128, 256].iter().map(|&n| (n, 0.5 * n as f64)).collect();
        assert!((fit_loglog_slope(&pts).unwrap() - 1.0).abs() < 1e-12);
        assert!(fit_loglog_slope(&pts[..1]).is_err());
    }

    #[test]
    fn upper_half_skips_small_sizes_and_oom() {
        let rec = |n: usize, t: Option<f64>| BenchRecord {
            variant: BenchVariant::Linear,
            n_tokens: n,
            median_s: t,
            repeats: 5,
        };
        // Small sizes are flat (overhead); large ones grow linearly.
        let records = vec![
            rec(1, Some(1.0)),
            rec(2, Some(1.0)),
            rec(4, Some(4.0)),
            rec(8, Some(8.0)),
            rec(16, Some(16.0)),
            rec(32, None),
        ];
        assert!((upper_half_slope(&records).unwrap() - 1.0).abs() < 1e-12);
        let csv = to_csv(&records);
        assert!(csv.starts_with("variant,n_tokens,median_s,repeats\n"));
        assert!(csv.ends_with("linear,32,OOM,5\n"));
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn kernels_are_consistent() {
        let inp = make_inputs(50, 1);
        let lin = run_linear(&inp).unwrap();
        assert_eq!(lin.shape(), (50, BENCH_D_HEAD));
        assert_eq!(run_pure(&inp).unwrap().shape(), (50, BENCH_D_HEAD));
        let sm = run_softmax(&inp).unwrap();
        // Softmax outputs are convex combinations of value rows.
        let v = matmul(&inp.x, &inp.w_v).unwrap();
        for j in 0..BENCH_D_HEAD {
            let (lo, hi) = (0..50).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), t| (l.min(v[(t, j)]), h.max(v[(t, j)])));
            for i in 0..50 {
                assert!(sm[(i, j)] >= lo - 1e-12 && sm[(i, j)] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn small_scaling_run() {
        let r = bench_scaling(BenchVariant::Linear, &[16, 32, 64, 128], 5, 3).unwrap();
        assert_eq!(r.records.len(), 4);
        assert!(r.records.iter().all(|x| x.median_s.unwrap() > 0.0 && x.repeats == 5));
        assert!(r.slope.is_finite());
        assert!("softmax-baseline".parse::<BenchVariant>().unwrap() == BenchVariant::SoftmaxBaseline);
        assert!("quadratic".parse::<BenchVariant>().is_err());
    }

    #[test]
    fn absurd_size_is_oom() {
        let r = time_variant(BenchVariant::Linear, usize::MAX / 8, 5, 0).unwrap();
        assert!(r.is_oom());
    }
}
